"""Slice geometry for labeled 3-D volumes.

A labeled volume is an intensity volume plus a binary tumor mask, indexed
``[x, y, z]``.  Anchor slices are the cross-sections with the largest
tumor area in each of the three orthogonal planes; windows of neighbor
slices are taken around the anchors, cropped to the tumor bounding box,
and resized into square tiles for downstream feature extraction.

Plane convention: sagittal = fixed x, coronal = fixed y, axial = fixed z.

File formats owned by this module:

* MVOL: little-endian, magic ``MVOL``, u32 version=1, u32 dx, u32 dy,
  u32 dz, u8 dtype code (0 = u8 mask, 1 = f32 intensities), then voxels
  x-fastest.  A labeled volume is a pair of MVOL files with equal dims.
* Tile: 8-byte header (u32 height, u32 width), then f32 row-major pixels.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InputError

log = logging.getLogger(__name__)

PLANES = ("sagittal", "coronal", "axial")

MVOL_MAGIC = b"MVOL"
MVOL_VERSION = 1
DTYPE_MASK = 0
DTYPE_INTENSITY = 1


@dataclass
class LabeledVolume:
    """Intensity volume and tumor mask, both shaped (dx, dy, dz)."""

    intensities: np.ndarray  # float32
    mask: np.ndarray  # uint8, nonzero = tumor

    def __post_init__(self):
        if self.intensities.ndim != 3 or self.mask.ndim != 3:
            raise InputError("volumes must be 3-D")
        if self.intensities.shape != self.mask.shape:
            raise InputError(
                f"intensity dims {self.intensities.shape} != mask dims {self.mask.shape}"
            )

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.intensities.shape


@dataclass(frozen=True)
class AnchorIndices:
    """Per-plane slice index of the largest tumor cross-section."""

    anchor_x: int
    anchor_y: int
    anchor_z: int

    def for_plane(self, plane: str) -> int:
        return getattr(self, "anchor_" + "xyz"[PLANES.index(plane)])


@dataclass(frozen=True)
class WindowConfig:
    """Left/right neighbor counts per plane; total slice budget is K."""

    k_x1: int = 0
    k_x2: int = 0
    k_y1: int = 0
    k_y2: int = 0
    k_z1: int = 0
    k_z2: int = 0

    def __post_init__(self):
        for name in ("k_x1", "k_x2", "k_y1", "k_y2", "k_z1", "k_z2"):
            if getattr(self, name) < 0:
                raise InputError(f"{name} must be nonnegative")

    @property
    def slice_budget(self) -> int:
        """K: window sizes plus the three anchors, before boundary clipping."""
        return self.k_x1 + self.k_x2 + self.k_y1 + self.k_y2 + self.k_z1 + self.k_z2 + 3

    def for_plane(self, plane: str) -> tuple[int, int]:
        q = "xyz"[PLANES.index(plane)]
        return getattr(self, f"k_{q}1"), getattr(self, f"k_{q}2")


@dataclass(frozen=True)
class SliceRef:
    plane: str
    index: int
    is_anchor: bool


def _plane_slice(volume: np.ndarray, plane: str, index: int) -> np.ndarray:
    if plane == "sagittal":
        return volume[index, :, :]
    if plane == "coronal":
        return volume[:, index, :]
    if plane == "axial":
        return volume[:, :, index]
    raise InputError(f"unknown plane {plane!r}")


def _plane_extent(dims: tuple[int, int, int], plane: str) -> int:
    return dims[PLANES.index(plane)]


def select_anchors(volume: LabeledVolume) -> AnchorIndices:
    """Pick, per plane, the slice with the most tumor voxels.

    Ties are broken toward the lowest index.  Raises InputError when the
    mask contains no tumor voxel at all.
    """
    tumor = volume.mask != 0
    if not tumor.any():
        raise InputError("volume has no tumor voxels; cannot select anchors")
    counts_x = tumor.sum(axis=(1, 2))
    counts_y = tumor.sum(axis=(0, 2))
    counts_z = tumor.sum(axis=(0, 1))
    return AnchorIndices(
        anchor_x=int(np.argmax(counts_x)),
        anchor_y=int(np.argmax(counts_y)),
        anchor_z=int(np.argmax(counts_z)),
    )


def slice_window(
    anchors: AnchorIndices, window: WindowConfig, dims: tuple[int, int, int]
) -> list[SliceRef]:
    """Expand anchors into per-plane neighbor windows, clipped to the volume.

    Emits slices plane by plane (sagittal, coronal, axial), each plane's
    indices ascending.  Out-of-range neighbors are dropped, so the list
    length is at most ``window.slice_budget``.
    """
    refs: list[SliceRef] = []
    for plane in PLANES:
        anchor = anchors.for_plane(plane)
        extent = _plane_extent(dims, plane)
        if not 0 <= anchor < extent:
            raise InputError(f"{plane} anchor {anchor} outside extent {extent}")
        k1, k2 = window.for_plane(plane)
        lo = max(anchor - k1, 0)
        hi = min(anchor + k2, extent - 1)
        for idx in range(lo, hi + 1):
            refs.append(SliceRef(plane=plane, index=idx, is_anchor=idx == anchor))
    return refs


def coverage_ratio(volume: LabeledVolume, slices: list[SliceRef]) -> float:
    """Fraction of tumor voxels lying on at least one selected slice."""
    tumor = volume.mask != 0
    total = int(tumor.sum())
    if total == 0:
        raise InputError("volume has no tumor voxels; coverage undefined")
    selected = np.zeros(volume.dims, dtype=bool)
    for ref in slices:
        if not 0 <= ref.index < _plane_extent(volume.dims, ref.plane):
            raise InputError(f"slice {ref.plane}:{ref.index} outside volume")
        _plane_slice(selected, ref.plane, ref.index)[:] = True
    covered = int((tumor & selected).sum())
    return covered / total


def bilinear_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Align-corners bilinear resize of a 2-D array.

    Source coordinate for output pixel d along an axis is
    ``d * (src_len - 1) / (dst_len - 1)``; axes of length 1 replicate.
    """
    if out_h < 1 or out_w < 1:
        raise InputError("output size must be positive")
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape

    def coords(n_src: int, n_dst: int) -> np.ndarray:
        if n_src == 1 or n_dst == 1:
            return np.zeros(n_dst)
        return np.arange(n_dst) * ((n_src - 1) / (n_dst - 1))

    ys = coords(h, out_h)
    xs = coords(w, out_w)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    a = img[np.ix_(y0, x0)]
    b = img[np.ix_(y0, x1)]
    c = img[np.ix_(y1, x0)]
    d = img[np.ix_(y1, x1)]
    return (a * (1 - fx) + b * fx) * (1 - fy) + (c * (1 - fx) + d * fx) * fy


def extract_tile(volume: LabeledVolume, ref: SliceRef, out_size: int = 224) -> np.ndarray:
    """Crop the tumor bounding box of one slice and resize it to a square tile.

    The bounding box is the tight extent of nonzero mask pixels within the
    2-D slice.  Raises InputError when the slice holds no tumor pixel.
    """
    mask2d = _plane_slice(volume.mask, ref.plane, ref.index) != 0
    if not mask2d.any():
        raise InputError(f"slice {ref.plane}:{ref.index} has no tumor pixels; empty bounding box")
    rows = np.flatnonzero(mask2d.any(axis=1))
    cols = np.flatnonzero(mask2d.any(axis=0))
    img = _plane_slice(volume.intensities, ref.plane, ref.index)
    crop = img[rows[0] : rows[-1] + 1, cols[0] : cols[-1] + 1]
    return bilinear_resize(crop, out_size, out_size)


# ---------------------------------------------------------------------------
# MVOL and tile file formats


def write_mvol(path: str | Path, voxels: np.ndarray, dtype_code: int) -> None:
    """Write one volume as an MVOL file (voxels stored x-fastest)."""
    if voxels.ndim != 3:
        raise InputError("MVOL payload must be 3-D")
    if dtype_code == DTYPE_MASK:
        arr = np.ascontiguousarray(voxels.T, dtype=np.uint8)
    elif dtype_code == DTYPE_INTENSITY:
        arr = np.ascontiguousarray(voxels.T, dtype="<f4")
    else:
        raise InputError(f"unknown MVOL dtype code {dtype_code}")
    dx, dy, dz = voxels.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sIIIIB", MVOL_MAGIC, MVOL_VERSION, dx, dy, dz, dtype_code))
        fh.write(arr.tobytes())


def read_mvol(path: str | Path) -> tuple[np.ndarray, int]:
    """Read an MVOL file; returns (volume shaped (dx, dy, dz), dtype code)."""
    raw = Path(path).read_bytes()
    header_size = struct.calcsize("<4sIIIIB")
    if len(raw) < header_size:
        raise InputError(f"{path}: truncated MVOL header")
    magic, version, dx, dy, dz, dtype_code = struct.unpack("<4sIIIIB", raw[:header_size])
    if magic != MVOL_MAGIC:
        raise InputError(f"{path}: bad magic {magic!r}")
    if version != MVOL_VERSION:
        raise InputError(f"{path}: unsupported MVOL version {version}")
    if dtype_code == DTYPE_MASK:
        dtype, itemsize = np.uint8, 1
    elif dtype_code == DTYPE_INTENSITY:
        dtype, itemsize = np.dtype("<f4"), 4
    else:
        raise InputError(f"{path}: unknown dtype code {dtype_code}")
    expected = dx * dy * dz * itemsize
    payload = raw[header_size:]
    if len(payload) != expected:
        raise InputError(f"{path}: payload is {len(payload)} bytes, expected {expected}")
    flat = np.frombuffer(payload, dtype=dtype)
    return flat.reshape((dz, dy, dx)).T.copy(), dtype_code


def load_labeled_volume(intensities_path: str | Path, mask_path: str | Path) -> LabeledVolume:
    """Load an (intensities, mask) MVOL pair and validate the pairing."""
    intensities, code_i = read_mvol(intensities_path)
    mask, code_m = read_mvol(mask_path)
    if code_i != DTYPE_INTENSITY:
        raise InputError(f"{intensities_path}: expected f32 intensities (dtype code 1)")
    if code_m != DTYPE_MASK:
        raise InputError(f"{mask_path}: expected u8 mask (dtype code 0)")
    if intensities.shape != mask.shape:
        raise InputError(
            f"intensities dims {intensities.shape} != mask dims {mask.shape}"
        )
    return LabeledVolume(intensities=intensities, mask=mask)


def write_tile(path: str | Path, tile: np.ndarray) -> None:
    h, w = tile.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack("<II", h, w))
        fh.write(np.ascontiguousarray(tile, dtype="<f4").tobytes())


def read_tile(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise InputError(f"{path}: truncated tile header")
    h, w = struct.unpack("<II", raw[:8])
    if len(raw) != 8 + 4 * h * w:
        raise InputError(f"{path}: tile payload size mismatch")
    return np.frombuffer(raw[8:], dtype="<f4").reshape((h, w)).astype(np.float64)


def export_tiles(
    volume: LabeledVolume,
    patient: str,
    window: WindowConfig,
    out_dir: str | Path,
    tile_size: int = 224,
) -> dict:
    """Select anchor windows, write tiles and a per-patient JSON sidecar.

    Tumor-free neighbor slices stay in the slice list but produce no tile;
    each is skipped with a warning.  Returns the sidecar payload.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    anchors = select_anchors(volume)
    refs = slice_window(anchors, window, volume.dims)
    ratio = coverage_ratio(volume, refs)
    entries = []
    for ref in refs:
        mask2d = _plane_slice(volume.mask, ref.plane, ref.index) != 0
        entry = {
            "plane": ref.plane,
            "index": ref.index,
            "is_anchor": ref.is_anchor,
            "has_tumor": bool(mask2d.any()),
            "tile": None,
        }
        if entry["has_tumor"]:
            name = f"{patient}_{ref.plane}_{ref.index}.tile"
            write_tile(out / name, extract_tile(volume, ref, tile_size))
            entry["tile"] = name
        else:
            log.warning(
                "patient %s: slice %s:%d has no tumor pixels, no tile written",
                patient,
                ref.plane,
                ref.index,
            )
        entries.append(entry)
    sidecar = {
        "patient": patient,
        "anchors": {
            "sagittal": anchors.anchor_x,
            "coronal": anchors.anchor_y,
            "axial": anchors.anchor_z,
        },
        "window": {
            "k_x1": window.k_x1,
            "k_x2": window.k_x2,
            "k_y1": window.k_y1,
            "k_y2": window.k_y2,
            "k_z1": window.k_z1,
            "k_z2": window.k_z2,
        },
        "tile_size": tile_size,
        "coverage_ratio": ratio,
        "slices": entries,
    }
    with open(out / f"{patient}.json", "w") as fh:
        json.dump(sidecar, fh, indent=2)
    return sidecar
