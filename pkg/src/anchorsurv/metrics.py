"""Evaluation statistics for survival risk models.

Concordance follows Harrell's convention: a pair (i, j) is comparable
when patient i has an observed event strictly earlier than patient j's
time; the pair is concordant when the model ranks i riskier.  Group
hazard ratios come from a univariate partial-likelihood fit on the
high/low indicator, solved by Newton's method with step halving.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InputError, NumericalError

LOW = "low"
HIGH = "high"


@dataclass
class RiskGroup:
    """Per-patient low/high assignment plus the threshold that produced it."""

    assignment: tuple[str, ...]
    threshold: float

    def __post_init__(self):
        for a in self.assignment:
            if a not in (LOW, HIGH):
                raise InputError(f"group label must be {LOW!r} or {HIGH!r}, got {a!r}")
        if not math.isfinite(self.threshold):
            raise InputError(f"threshold must be finite, got {self.threshold}")

    def high_mask(self) -> np.ndarray:
        return np.array([a == HIGH for a in self.assignment])


@dataclass
class HazardRatioFit:
    beta: float  # log hazard ratio of high vs low
    hr: float
    converged: bool
    iterations: int
    diagnostic: str | None = None
    ll_trace: tuple[float, ...] = ()  # partial log likelihood after each accepted step


def _unpack(labels) -> tuple[np.ndarray, np.ndarray]:
    times = np.array([lab.time for lab in labels], dtype=np.float64)
    events = np.array([bool(lab.event) for lab in labels])
    return times, events


def c_index(risks, labels) -> float:
    """Harrell's concordance index.

    Pairs are comparable iff t_i < t_j and patient i had an event;
    concordant pairs (r_i > r_j) score 1, tied risks 0.5.  Raises a
    numerical error when no pair is comparable.
    """
    r = np.asarray(risks, dtype=np.float64)
    if r.ndim != 1 or r.size < 2:
        raise InputError("c_index needs at least 2 patients")
    if len(labels) != r.size:
        raise InputError(f"{r.size} risks vs {len(labels)} labels")
    times, events = _unpack(labels)
    comparable = (times[:, None] < times[None, :]) & events[:, None]
    n_comparable = int(comparable.sum())
    if n_comparable == 0:
        raise NumericalError("no comparable pairs; concordance is undefined")
    wins = comparable & (r[:, None] > r[None, :])
    ties = comparable & (r[:, None] == r[None, :])
    return (int(wins.sum()) + 0.5 * int(ties.sum())) / n_comparable


def median_split(train_risks, eval_risks) -> RiskGroup:
    """Assign eval patients by the training-set median risk.

    The threshold is the median of the training risks (mean of the two
    central values on even counts); a patient is high iff risk is
    strictly above it.
    """
    tr = np.asarray(train_risks, dtype=np.float64)
    if tr.ndim != 1 or tr.size == 0:
        raise InputError("median_split needs nonempty training risks")
    ev = np.asarray(eval_risks, dtype=np.float64)
    threshold = float(np.median(tr))
    return RiskGroup(
        assignment=tuple(HIGH if r > threshold else LOW for r in ev),
        threshold=threshold,
    )


def majority_vote(groups: list[RiskGroup]) -> RiskGroup:
    """Modal group per patient across folds; vote ties go to high.

    The combined threshold is the median of the fold thresholds and is
    carried along for reporting only.
    """
    if not groups:
        raise InputError("majority_vote needs at least one fold")
    n = len(groups[0].assignment)
    for g in groups:
        if len(g.assignment) != n:
            raise InputError("folds vote on different patient counts")
    votes = np.zeros(n, dtype=int)
    for g in groups:
        votes += g.high_mask()
    assignment = tuple(HIGH if 2 * v >= len(groups) else LOW for v in votes)
    return RiskGroup(
        assignment=assignment,
        threshold=float(np.median([g.threshold for g in groups])),
    )


def _group_log_likelihood(beta: float, events_x, n_high_at_risk, n_low_at_risk) -> float:
    # sum over events of (beta * x_i - log(n0_i + n1_i * exp(beta)))
    eb = math.exp(beta)
    s0 = n_low_at_risk + n_high_at_risk * eb
    return float(np.sum(beta * events_x - np.log(s0)))


def hazard_ratio(groups: RiskGroup, labels, max_iter: int = 100, tol: float = 1e-10) -> HazardRatioFit:
    """Univariate partial-likelihood fit on the high-group indicator.

    Newton's method with analytic first and second derivatives; a step is
    halved until it does not decrease the likelihood.  Convergence is
    |step| < 1e-10 within 100 iterations.  When one group has no events
    the likelihood has no finite maximizer, reported as non-converged
    with a diagnostic instead of a fit.
    """
    x = groups.high_mask()
    if len(labels) != x.size:
        raise InputError(f"{x.size} assignments vs {len(labels)} labels")
    if x.all() or (~x).all():
        raise InputError("hazard_ratio needs both groups nonempty")
    times, events = _unpack(labels)
    if not events.any():
        raise InputError("hazard_ratio needs at least one event")
    ev_high = int((events & x).sum())
    ev_low = int((events & ~x).sum())
    if ev_high == 0 or ev_low == 0:
        side = HIGH if ev_high == 0 else LOW
        return HazardRatioFit(
            beta=math.nan,
            hr=math.nan,
            converged=False,
            iterations=0,
            diagnostic=f"separation: no events in the {side} group, effect estimate is unbounded",
        )

    # Per event time: group counts still at risk (t_j >= t_i, ties inclusive).
    event_times = times[events]
    high_sorted = np.sort(times[x])
    low_sorted = np.sort(times[~x])
    n_high = len(high_sorted) - np.searchsorted(high_sorted, event_times, side="left")
    n_low = len(low_sorted) - np.searchsorted(low_sorted, event_times, side="left")
    events_x = x[events].astype(np.float64)

    beta = 0.0
    ll = _group_log_likelihood(beta, events_x, n_high, n_low)
    trace = [ll]
    for it in range(1, max_iter + 1):
        eb = math.exp(beta)
        p = n_high * eb / (n_low + n_high * eb)
        score = float(np.sum(events_x - p))
        info = float(np.sum(p * (1.0 - p)))
        if info <= 0.0:
            return HazardRatioFit(
                beta=beta,
                hr=math.exp(beta),
                converged=False,
                iterations=it,
                diagnostic="information is zero; likelihood is flat",
                ll_trace=tuple(trace),
            )
        step = score / info
        # halve until the likelihood does not decrease
        for _ in range(60):
            candidate = beta + step
            cand_ll = _group_log_likelihood(candidate, events_x, n_high, n_low)
            if cand_ll >= ll - 1e-13:
                break
            step *= 0.5
        beta = beta + step
        ll = _group_log_likelihood(beta, events_x, n_high, n_low)
        trace.append(ll)
        if abs(beta) > 50.0:
            return HazardRatioFit(
                beta=beta,
                hr=math.inf if beta > 0 else 0.0,
                converged=False,
                iterations=it,
                diagnostic="estimate diverging; groups close to separation",
                ll_trace=tuple(trace),
            )
        if abs(step) < tol:
            return HazardRatioFit(
                beta=beta, hr=math.exp(beta), converged=True, iterations=it, ll_trace=tuple(trace)
            )
    return HazardRatioFit(
        beta=beta,
        hr=math.exp(beta),
        converged=False,
        iterations=max_iter,
        diagnostic="iteration limit reached",
        ll_trace=tuple(trace),
    )
