"""Cox partial-likelihood training objective and the risk models it trains.

The loss couples all patients through risk sets: for each observed death
the model's risk for that patient competes against everyone still under
observation at that time.  Seven model kinds share the objective:

* daal-single: anchor attention, risk from the sagittal-anchor summary;
* daal-multiple: anchor attention, risk is the max over the three planes;
* attn-mil: gated attention pooling with a linear risk layer;
* mean-cox / max-cox: plain pooling with a linear risk layer;
* deepsurv-mean / deepsurv-max: plain pooling with a small rectifier MLP.

Linear risk layers carry no bias: the loss is invariant to a constant
shift of all risks, so an output bias is unidentifiable.  The MLP keeps a
bias on its hidden layer only, for the same reason.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .aggregation import (
    AttnMilGrads,
    AttnMilParams,
    DaalGrads,
    DaalParams,
    FeatureBag,
    attnmil_backward,
    attnmil_forward,
    daal_backward,
    daal_forward,
    pool,
)
from .errors import InputError
from .numerics import Rng, glorot_init

METHOD_KINDS = (
    "daal-single",
    "daal-multiple",
    "attn-mil",
    "mean-cox",
    "max-cox",
    "deepsurv-mean",
    "deepsurv-max",
)

CHECKPOINT_MANIFEST = "manifest.json"
CHECKPOINT_BLOB = "params.bin"


@dataclass(frozen=True)
class SurvivalLabel:
    """Follow-up time in days and whether death was observed (else censored)."""

    time: float
    event: bool

    def __post_init__(self):
        if not (self.time > 0 and np.isfinite(self.time)):
            raise InputError(f"time must be positive and finite, got {self.time}")


def _unpack_labels(labels) -> tuple[np.ndarray, np.ndarray]:
    times = np.array([lab.time for lab in labels], dtype=np.float64)
    events = np.array([1.0 if lab.event else 0.0 for lab in labels], dtype=np.float64)
    return times, events


def cox_loss(risks, labels) -> float:
    """Negative log partial likelihood.

    For each patient i with an observed event, the contribution is
    -r_i + log sum over {j : t_j >= t_i} of exp(r_j).  The risk set is
    inclusive at tied times, and the log-sum-exp is max-shifted.
    """
    r = np.asarray(risks, dtype=np.float64)
    if r.ndim != 1 or r.size == 0:
        raise InputError("risks must be a nonempty 1-D vector")
    if len(labels) != r.size:
        raise InputError(f"{r.size} risks vs {len(labels)} labels")
    if not np.isfinite(r).all():
        raise InputError("risks contain non-finite entries")
    times, events = _unpack_labels(labels)
    shift = r.max()
    e = np.exp(r - shift)
    at_risk = times[None, :] >= times[:, None]  # row i: risk set of patient i
    s0 = at_risk @ e
    return float(events @ (np.log(s0) - (r - shift)))


def cox_grad(risks, labels) -> np.ndarray:
    """Analytic gradient of cox_loss w.r.t. the risk vector.

    d/dr_k = -event_k + sum over events i with t_k >= t_i of
    exp(r_k) / (risk-set sum at i).  Components always sum to zero, a
    consequence of the loss's shift invariance.
    """
    r = np.asarray(risks, dtype=np.float64)
    if r.ndim != 1 or r.size == 0:
        raise InputError("risks must be a nonempty 1-D vector")
    if len(labels) != r.size:
        raise InputError(f"{r.size} risks vs {len(labels)} labels")
    if not np.isfinite(r).all():
        raise InputError("risks contain non-finite entries")
    times, events = _unpack_labels(labels)
    e = np.exp(r - r.max())
    at_risk = times[None, :] >= times[:, None]
    s0 = at_risk @ e
    return -events + e * (at_risk.T @ (events / s0))


# ---------------------------------------------------------------------------
# Risk heads


@dataclass
class RiskHead:
    """Stack of affine layers with rectifier activations between them.

    Each layer is a (weight, bias) pair; bias may be None.  The last
    layer's output is the scalar risk, with no activation.  An empty
    layer list is the degenerate identity head on a length-1 input.
    """

    layers: list[tuple[np.ndarray, np.ndarray | None]]

    def __post_init__(self):
        prev = None
        for i, (w, b) in enumerate(self.layers):
            if w.ndim != 2:
                raise InputError(f"head layer {i} weight must be 2-D")
            if b is not None and b.shape != (w.shape[0],):
                raise InputError(f"head layer {i} bias shape {b.shape} != ({w.shape[0]},)")
            if prev is not None and w.shape[1] != prev:
                raise InputError(f"head layer {i} expects input dim {w.shape[1]}, got {prev}")
            prev = w.shape[0]
        if self.layers and self.layers[-1][0].shape[0] != 1:
            raise InputError("head output must be scalar")

    @property
    def input_dim(self) -> int | None:
        return self.layers[0][0].shape[1] if self.layers else None


def head_forward(head: RiskHead, x: np.ndarray) -> tuple[float, list]:
    """Evaluate the head; returns (risk, cache of per-layer inputs and preactivations)."""
    h = np.asarray(x, dtype=np.float64)
    if not head.layers:
        if h.shape != (1,):
            raise InputError(f"identity head requires a length-1 input, got shape {h.shape}")
        return float(h[0]), []
    cache = []
    last = len(head.layers) - 1
    for i, (w, b) in enumerate(head.layers):
        if h.shape != (w.shape[1],):
            raise InputError(f"head layer {i} expects input dim {w.shape[1]}, got {h.shape}")
        z = w @ h
        if b is not None:
            z = z + b
        cache.append((h, z))
        h = np.maximum(z, 0.0) if i < last else z
    return float(h[0]), cache


def head_backward(
    head: RiskHead, cache: list, upstream: float
) -> tuple[list[tuple[np.ndarray, np.ndarray | None]], np.ndarray]:
    """Gradients of upstream * risk w.r.t. head parameters and the head input."""
    if not head.layers:
        return [], np.array([upstream])
    grads: list[tuple[np.ndarray, np.ndarray | None]] = [None] * len(head.layers)
    last = len(head.layers) - 1
    dz = np.array([upstream])
    for i in range(last, -1, -1):
        w, b = head.layers[i]
        h, z = cache[i]
        if i < last:
            dz = dz * (z > 0.0)
        grads[i] = (np.outer(dz, h), dz.copy() if b is not None else None)
        dz = w.T @ dz
    return grads, dz


# ---------------------------------------------------------------------------
# Methods: aggregator + head packages


@dataclass
class Method:
    """One trainable risk model: a kind tag, optional attention parameters, a head.

    ``train_through_max`` only matters for daal-multiple: when set (the
    default) the training risk is the max over planes, with the
    subgradient routed to the argmax plane (ties to the lowest plane
    index); when cleared, training uses the mean of the per-plane risks
    and only evaluation takes the max.
    """

    kind: str
    head: RiskHead
    attention: DaalParams | AttnMilParams | None = None
    train_through_max: bool = True

    def __post_init__(self):
        if self.kind not in METHOD_KINDS:
            raise InputError(f"unknown method kind {self.kind!r}; expected one of {METHOD_KINDS}")
        if self.kind.startswith("daal") and not isinstance(self.attention, DaalParams):
            raise InputError(f"{self.kind} requires anchor-attention parameters")
        if self.kind == "attn-mil" and not isinstance(self.attention, AttnMilParams):
            raise InputError("attn-mil requires gated-attention parameters")
        if self.kind in ("mean-cox", "max-cox", "deepsurv-mean", "deepsurv-max"):
            if self.attention is not None:
                raise InputError(f"{self.kind} takes no attention parameters")


@dataclass(frozen=True)
class ModelDims:
    n_features: int
    query_dim: int = 64
    value_dim: int = 64
    gate_dim: int = 64
    hidden_dim: int = 32


def init_method(kind: str, dims: ModelDims, rng: Rng, train_through_max: bool = True) -> Method:
    """Build a method with uniform Glorot weights and zero biases.

    Draw order matches the checkpoint block order, so equal seeds give
    equal models.
    """
    f = dims.n_features
    if kind in ("daal-single", "daal-multiple"):
        attention = DaalParams(
            query_weight=glorot_init(dims.query_dim, f, rng),
            value_weight=glorot_init(dims.value_dim, f, rng),
        )
        head = RiskHead([(glorot_init(1, dims.value_dim, rng), None)])
    elif kind == "attn-mil":
        attention = AttnMilParams(
            gate_weight=glorot_init(dims.gate_dim, f, rng),
            score_vector=glorot_init(1, dims.gate_dim, rng)[0],
        )
        head = RiskHead([(glorot_init(1, f, rng), None)])
    elif kind in ("mean-cox", "max-cox"):
        attention = None
        head = RiskHead([(glorot_init(1, f, rng), None)])
    elif kind in ("deepsurv-mean", "deepsurv-max"):
        attention = None
        head = RiskHead(
            [
                (glorot_init(dims.hidden_dim, f, rng), np.zeros(dims.hidden_dim)),
                (glorot_init(1, dims.hidden_dim, rng), None),
            ]
        )
    else:
        raise InputError(f"unknown method kind {kind!r}; expected one of {METHOD_KINDS}")
    return Method(kind=kind, head=head, attention=attention, train_through_max=train_through_max)


def param_blocks(method: Method) -> list[tuple[str, np.ndarray]]:
    """Named parameter arrays in checkpoint order.

    Order: attention blocks first (query_weight, value_weight for anchor
    attention; gate_weight, score_vector for gated attention), then head
    layers outermost-first, weight before bias.
    """
    blocks: list[tuple[str, np.ndarray]] = []
    if isinstance(method.attention, DaalParams):
        blocks.append(("query_weight", method.attention.query_weight))
        blocks.append(("value_weight", method.attention.value_weight))
    elif isinstance(method.attention, AttnMilParams):
        blocks.append(("gate_weight", method.attention.gate_weight))
        blocks.append(("score_vector", method.attention.score_vector))
    for i, (w, b) in enumerate(method.head.layers):
        blocks.append((f"head_{i}_weight", w))
        if b is not None:
            blocks.append((f"head_{i}_bias", b))
    return blocks


def replace_params(method: Method, arrays: list[np.ndarray]) -> Method:
    """Rebuild the method around a new parameter list (checkpoint order)."""
    expected = param_blocks(method)
    if len(arrays) != len(expected):
        raise InputError(f"expected {len(expected)} parameter blocks, got {len(arrays)}")
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    for (name, old), new in zip(expected, arrays):
        if new.shape != old.shape:
            raise InputError(f"block {name}: shape {new.shape} != {old.shape}")
    it = iter(arrays)
    if isinstance(method.attention, DaalParams):
        attention = DaalParams(query_weight=next(it), value_weight=next(it))
    elif isinstance(method.attention, AttnMilParams):
        attention = AttnMilParams(gate_weight=next(it), score_vector=next(it))
    else:
        attention = None
    layers = []
    for _, b in method.head.layers:
        w_new = next(it)
        b_new = next(it) if b is not None else None
        layers.append((w_new, b_new))
    return replace(method, head=RiskHead(layers), attention=attention)


def clone_params(method: Method) -> list[np.ndarray]:
    return [arr.copy() for _, arr in param_blocks(method)]


# ---------------------------------------------------------------------------
# Forward and backward risk


@dataclass
class RiskResult:
    """Scalar risk plus per-plane risks (anchor-attention kinds only) and a backward cache."""

    risk: float
    per_plane: tuple[float, float, float] | None
    cache: dict


def _pool_mode(kind: str) -> str:
    return "mean" if kind in ("mean-cox", "deepsurv-mean") else "max"


def forward_risk(method: Method, bag: FeatureBag) -> RiskResult:
    """Risk score for one patient.

    daal-single reads the sagittal-anchor summary; daal-multiple takes
    the max of the three per-plane risks through a shared head; the
    pooling kinds apply their head to the pooled feature vector.
    """
    if method.kind in ("daal-single", "daal-multiple"):
        rep = daal_forward(bag, method.attention)
        risks = []
        caches = []
        for b in rep.plane_reps:
            r, c = head_forward(method.head, b)
            risks.append(r)
            caches.append(c)
        per_plane = tuple(risks)
        if method.kind == "daal-single":
            risk = per_plane[0]
        else:
            risk = max(per_plane)
        cache = {"rep": rep, "head_caches": caches, "per_plane": per_plane}
        return RiskResult(risk=risk, per_plane=per_plane, cache=cache)
    if method.kind == "attn-mil":
        rep = attnmil_forward(bag, method.attention)
        risk, hc = head_forward(method.head, rep.pooled)
        return RiskResult(risk=risk, per_plane=None, cache={"rep": rep, "head_cache": hc})
    pooled = pool(bag, _pool_mode(method.kind))
    risk, hc = head_forward(method.head, pooled)
    return RiskResult(risk=risk, per_plane=None, cache={"pooled": pooled, "head_cache": hc})


def training_risk(method: Method, bag: FeatureBag) -> RiskResult:
    """Risk used inside the training objective.

    Identical to forward_risk except for daal-multiple with
    train_through_max cleared, where the training risk is the mean of
    the per-plane risks.
    """
    out = forward_risk(method, bag)
    if method.kind == "daal-multiple" and not method.train_through_max:
        return RiskResult(
            risk=float(sum(out.per_plane)) / 3.0, per_plane=out.per_plane, cache=out.cache
        )
    return out


def risk_backward(
    method: Method, bag: FeatureBag, result: RiskResult, upstream: float
) -> list[np.ndarray]:
    """Gradient of upstream * training risk w.r.t. every parameter block.

    Returns arrays aligned with param_blocks(method).  For daal-multiple
    in max mode the subgradient follows the argmax plane, ties to the
    lowest plane index.
    """
    if method.kind in ("daal-single", "daal-multiple"):
        caches = result.cache["head_caches"]
        per_plane = result.cache["per_plane"]
        if method.kind == "daal-single":
            plane_up = [upstream, 0.0, 0.0]
        elif method.train_through_max:
            winner = per_plane.index(max(per_plane))
            plane_up = [0.0, 0.0, 0.0]
            plane_up[winner] = upstream
        else:
            plane_up = [upstream / 3.0] * 3
        head_grads = None
        rep_grads = []
        for c, up in zip(caches, plane_up):
            hg, dx = head_backward(method.head, c, up)
            rep_grads.append(dx)
            if head_grads is None:
                head_grads = hg
            else:
                head_grads = [
                    (gw + hw, None if gb is None else gb + hb)
                    for (gw, gb), (hw, hb) in zip(head_grads, hg)
                ]
        agg = daal_backward(bag, method.attention, tuple(rep_grads))
        out = [agg.query_weight, agg.value_weight]
    elif method.kind == "attn-mil":
        hg, dx = head_backward(method.head, result.cache["head_cache"], upstream)
        agg = attnmil_backward(bag, method.attention, dx)
        out = [agg.gate_weight, agg.score_vector]
        head_grads = hg
    else:
        head_grads, _ = head_backward(method.head, result.cache["head_cache"], upstream)
        out = []
    for gw, gb in head_grads:
        out.append(gw)
        if gb is not None:
            out.append(gb)
    return out


def cohort_risks(method: Method, bags: list[FeatureBag], training: bool = False):
    """Risks for a list of bags; returns (vector, per-bag RiskResults)."""
    fn = training_risk if training else forward_risk
    results = [fn(method, bag) for bag in bags]
    return np.array([r.risk for r in results]), results


def cohort_gradient(method: Method, bags: list[FeatureBag], labels):
    """Full-cohort loss and parameter gradient of the partial-likelihood objective."""
    risks, results = cohort_risks(method, bags, training=True)
    loss = cox_loss(risks, labels)
    upstream = cox_grad(risks, labels)
    grads = [np.zeros_like(arr) for _, arr in param_blocks(method)]
    for bag, res, up in zip(bags, results, upstream):
        if up == 0.0:
            continue
        for acc, g in zip(grads, risk_backward(method, bag, res, float(up))):
            acc += g
    return loss, grads


# ---------------------------------------------------------------------------
# Checkpoints: JSON manifest + raw f32 little-endian parameter blob


def save_checkpoint(out_dir: str | Path, method: Method, dims: ModelDims, meta: dict) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    blocks = param_blocks(method)
    manifest = {
        "kind": method.kind,
        "dims": {
            "n_features": dims.n_features,
            "query_dim": dims.query_dim,
            "value_dim": dims.value_dim,
            "gate_dim": dims.gate_dim,
            "hidden_dim": dims.hidden_dim,
        },
        "train_through_max": method.train_through_max,
        "param_blocks": [{"name": name, "shape": list(arr.shape)} for name, arr in blocks],
    }
    manifest.update(meta)
    with open(out / CHECKPOINT_MANIFEST, "w") as fh:
        json.dump(manifest, fh, indent=2)
    with open(out / CHECKPOINT_BLOB, "wb") as fh:
        for _, arr in blocks:
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(model_dir: str | Path) -> tuple[Method, dict]:
    """Rebuild a method from a checkpoint directory; returns (method, manifest).

    Parameters are stored as 32-bit floats, so a save/load round trip
    quantizes them.
    """
    model_dir = Path(model_dir)
    manifest_path = model_dir / CHECKPOINT_MANIFEST
    blob_path = model_dir / CHECKPOINT_BLOB
    if not manifest_path.is_file() or not blob_path.is_file():
        raise InputError(f"{model_dir} is not a checkpoint directory")
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    try:
        kind = manifest["kind"]
        dims = ModelDims(**manifest["dims"])
        block_spec = manifest["param_blocks"]
    except (KeyError, TypeError) as exc:
        raise InputError(f"{manifest_path}: malformed checkpoint manifest ({exc})")
    raw = blob_path.read_bytes()
    arrays = []
    offset = 0
    for spec in block_spec:
        shape = tuple(spec["shape"])
        n = int(np.prod(shape)) if shape else 1
        chunk = raw[offset : offset + 4 * n]
        if len(chunk) != 4 * n:
            raise InputError(f"{blob_path}: truncated parameter blob")
        arrays.append(np.frombuffer(chunk, dtype="<f4").astype(np.float64).reshape(shape))
        offset += 4 * n
    if offset != len(raw):
        raise InputError(f"{blob_path}: {len(raw) - offset} trailing bytes")
    skeleton = init_method(
        kind, dims, Rng(0), train_through_max=bool(manifest.get("train_through_max", True))
    )
    names = [name for name, _ in param_blocks(skeleton)]
    if names != [spec["name"] for spec in block_spec]:
        raise InputError(f"{manifest_path}: parameter blocks do not match kind {kind!r}")
    return replace_params(skeleton, arrays), manifest
