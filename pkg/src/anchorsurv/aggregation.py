"""Patient-level representations from bags of slice features.

A patient arrives as a bag of K slice-level feature vectors (produced by
an external backbone and exchanged via the FVEC format) together with the
positions of the three anchor slices inside that bag.  Three aggregators
turn the bag into fixed-size patient vectors:

* anchor attention: every slice is projected to a query and a value; for
  each anchor, softmax similarity between slice queries and the anchor's
  query weights the value vectors into one summary per anchor plane;
* gated attention pooling: a tanh-gated scorer weights the raw feature
  vectors into a single pooled vector;
* plain mean / max pooling across the bag.

Forward passes are paired with hand-derived parameter gradients so the
whole pipeline trains without an autodiff framework.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InputError
from .numerics import softmax

FVEC_MAGIC = b"FVEC"
FVEC_VERSION = 1


def _as_float_matrix(x, name: str) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise InputError(f"{name} must be 2-D, got shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise InputError(f"{name} contains non-finite entries")
    return arr


@dataclass
class FeatureBag:
    """K slice feature vectors plus the anchor positions within the bag.

    ``anchor_pos`` holds the list positions (not volume slice indices) of
    the sagittal, coronal, and axial anchor slices, in that order.
    """

    features: np.ndarray  # (K, F)
    anchor_pos: tuple[int, int, int]
    patient_id: str = ""

    def __post_init__(self):
        self.features = _as_float_matrix(self.features, "features")
        k = self.features.shape[0]
        if k < 3:
            raise InputError(f"bag needs at least 3 slices, got {k}")
        pos = tuple(int(a) for a in self.anchor_pos)
        if len(pos) != 3 or len(set(pos)) != 3:
            raise InputError(f"anchor positions must be 3 distinct values, got {self.anchor_pos}")
        for a in pos:
            if not 0 <= a < k:
                raise InputError(f"anchor position {a} outside bag of {k} slices")
        self.anchor_pos = pos

    @property
    def n_slices(self) -> int:
        return self.features.shape[0]

    @property
    def n_features(self) -> int:
        return self.features.shape[1]


@dataclass
class DaalParams:
    """Projection matrices for anchor attention.

    ``query_weight`` maps a slice feature vector to query space and
    ``value_weight`` to value space; one shared pair serves all slices
    and all three anchors.
    """

    query_weight: np.ndarray  # (D, F)
    value_weight: np.ndarray  # (L, F)

    def __post_init__(self):
        self.query_weight = _as_float_matrix(self.query_weight, "query_weight")
        self.value_weight = _as_float_matrix(self.value_weight, "value_weight")
        if self.query_weight.shape[1] != self.value_weight.shape[1]:
            raise InputError(
                "query_weight and value_weight disagree on feature dimension: "
                f"{self.query_weight.shape[1]} vs {self.value_weight.shape[1]}"
            )


@dataclass
class AttnMilParams:
    """Tanh-gated attention scorer: score_s = score_vector . tanh(gate_weight h_s)."""

    gate_weight: np.ndarray  # (A, F)
    score_vector: np.ndarray  # (A,)

    def __post_init__(self):
        self.gate_weight = _as_float_matrix(self.gate_weight, "gate_weight")
        v = np.asarray(self.score_vector, dtype=np.float64)
        if v.ndim != 1 or v.shape[0] != self.gate_weight.shape[0]:
            raise InputError(
                f"score_vector shape {v.shape} incompatible with gate_weight {self.gate_weight.shape}"
            )
        if not np.isfinite(v).all():
            raise InputError("score_vector contains non-finite entries")
        self.score_vector = v


@dataclass
class PatientRep:
    """Aggregated patient representation.

    Anchor attention fills ``plane_reps`` with one vector per anchor
    plane (sagittal, coronal, axial order); pooling aggregators fill
    ``pooled`` instead.  ``weights_per_anchor`` carries the attention
    weight vector(s) over the K slices, each summing to 1.
    """

    plane_reps: tuple[np.ndarray, np.ndarray, np.ndarray] | None
    pooled: np.ndarray | None
    weights_per_anchor: tuple[np.ndarray, ...]


@dataclass
class DaalGrads:
    query_weight: np.ndarray
    value_weight: np.ndarray


@dataclass
class AttnMilGrads:
    gate_weight: np.ndarray
    score_vector: np.ndarray


def _check_daal_dims(bag: FeatureBag, params: DaalParams) -> None:
    if params.query_weight.shape[1] != bag.n_features:
        raise InputError(
            f"query_weight expects {params.query_weight.shape[1]} features, bag has {bag.n_features}"
        )


def daal_forward(bag: FeatureBag, params: DaalParams) -> PatientRep:
    """Anchor-attention aggregation.

    Every slice feature h_s is projected to a query q_s and a value v_s.
    For each anchor position a, the weight of slice s is the softmax over
    slices of the inner product <q_s, q_a>; the plane representation is
    the weight-averaged sum of the value vectors.  The anchor's own
    self-similarity term participates in its softmax, and attention runs
    over the full bag, planes included.
    """
    _check_daal_dims(bag, params)
    queries = bag.features @ params.query_weight.T  # (K, D)
    values = bag.features @ params.value_weight.T  # (K, L)
    reps = []
    weights = []
    for a in bag.anchor_pos:
        u = softmax(queries @ queries[a])
        reps.append(values.T @ u)
        weights.append(u)
    return PatientRep(plane_reps=tuple(reps), pooled=None, weights_per_anchor=tuple(weights))


def daal_backward(
    bag: FeatureBag,
    params: DaalParams,
    upstream_grads: tuple[np.ndarray, np.ndarray, np.ndarray],
) -> DaalGrads:
    """Exact parameter gradients for the anchor-attention forward pass.

    ``upstream_grads`` are the loss gradients w.r.t. the three plane
    representations.  The inner product <q_s, q_a> depends on the query
    projection through both of its arguments; both contributions are
    accumulated, which doubles the anchor's own diagonal term.
    """
    _check_daal_dims(bag, params)
    if len(upstream_grads) != 3:
        raise InputError("expected one upstream gradient per anchor plane")
    feats = bag.features
    queries = feats @ params.query_weight.T
    values = feats @ params.value_weight.T
    d_queries = np.zeros_like(queries)
    d_values = np.zeros_like(values)
    for a, g in zip(bag.anchor_pos, upstream_grads):
        g = np.asarray(g, dtype=np.float64)
        if g.shape != (values.shape[1],):
            raise InputError(f"upstream gradient shape {g.shape} != value dim ({values.shape[1]},)")
        u = softmax(queries @ queries[a])
        d_values += np.outer(u, g)
        du = values @ g
        # softmax Jacobian applied to the similarity scores
        dz = u * (du - float(u @ du))
        d_queries += np.outer(dz, queries[a])
        d_queries[a] += queries.T @ dz
    return DaalGrads(
        query_weight=d_queries.T @ feats,
        value_weight=d_values.T @ feats,
    )


def attnmil_forward(bag: FeatureBag, params: AttnMilParams) -> PatientRep:
    """Gated attention pooling over raw slice features.

    Slice scores are score_vector . tanh(gate_weight h_s); softmax over
    slices gives the weights; the pooled vector is the weighted sum of
    the untransformed h_s.
    """
    if params.gate_weight.shape[1] != bag.n_features:
        raise InputError(
            f"gate_weight expects {params.gate_weight.shape[1]} features, bag has {bag.n_features}"
        )
    gated = np.tanh(bag.features @ params.gate_weight.T)  # (K, A)
    a = softmax(gated @ params.score_vector)
    return PatientRep(
        plane_reps=None,
        pooled=bag.features.T @ a,
        weights_per_anchor=(a,),
    )


def attnmil_backward(
    bag: FeatureBag, params: AttnMilParams, upstream_grad: np.ndarray
) -> AttnMilGrads:
    """Exact parameter gradients for gated attention pooling."""
    if params.gate_weight.shape[1] != bag.n_features:
        raise InputError(
            f"gate_weight expects {params.gate_weight.shape[1]} features, bag has {bag.n_features}"
        )
    g = np.asarray(upstream_grad, dtype=np.float64)
    if g.shape != (bag.n_features,):
        raise InputError(f"upstream gradient shape {g.shape} != feature dim ({bag.n_features},)")
    feats = bag.features
    gated = np.tanh(feats @ params.gate_weight.T)
    a = softmax(gated @ params.score_vector)
    da = feats @ g
    de = a * (da - float(a @ da))
    d_score = gated.T @ de
    d_pre = np.outer(de, params.score_vector) * (1.0 - gated * gated)
    return AttnMilGrads(gate_weight=d_pre.T @ feats, score_vector=d_score)


def pool(bag: FeatureBag, mode: str) -> np.ndarray:
    """Coordinatewise mean or max across the bag's feature vectors."""
    if mode == "mean":
        return bag.features.mean(axis=0)
    if mode == "max":
        return bag.features.max(axis=0)
    raise InputError(f"unknown pooling mode {mode!r}; expected 'mean' or 'max'")


# ---------------------------------------------------------------------------
# FVEC: the boundary format to external feature extractors


def write_fvec(path: str | Path, bag: FeatureBag) -> None:
    ax, ay, az = bag.anchor_pos
    with open(path, "wb") as fh:
        fh.write(
            struct.pack(
                "<4sIIIIII",
                FVEC_MAGIC,
                FVEC_VERSION,
                bag.n_slices,
                bag.n_features,
                ax,
                ay,
                az,
            )
        )
        fh.write(np.ascontiguousarray(bag.features, dtype="<f4").tobytes())


def read_fvec(path: str | Path, patient_id: str | None = None) -> FeatureBag:
    """Read one FVEC file; patient id defaults to the file stem."""
    path = Path(path)
    raw = path.read_bytes()
    header_size = struct.calcsize("<4sIIIIII")
    if len(raw) < header_size:
        raise InputError(f"{path}: truncated FVEC header")
    magic, version, k, f, ax, ay, az = struct.unpack("<4sIIIIII", raw[:header_size])
    if magic != FVEC_MAGIC:
        raise InputError(f"{path}: bad magic {magic!r}")
    if version != FVEC_VERSION:
        raise InputError(f"{path}: unsupported FVEC version {version}")
    payload = raw[header_size:]
    if len(payload) != 4 * k * f:
        raise InputError(f"{path}: payload is {len(payload)} bytes, expected {4 * k * f}")
    feats = np.frombuffer(payload, dtype="<f4").reshape((k, f)).astype(np.float64)
    return FeatureBag(
        features=feats,
        anchor_pos=(ax, ay, az),
        patient_id=patient_id if patient_id is not None else path.stem,
    )
