"""Shared builders for randomized oracle tests.

Test data comes from numpy's own generator so the oracles stay
independent of the package's PRNG.
"""

import numpy as np
import pytest

from anchorsurv.aggregation import FeatureBag
from anchorsurv.survival import SurvivalLabel


def make_bag(rng: np.random.Generator, k: int = 5, f: int = 4) -> FeatureBag:
    anchors = tuple(rng.choice(k, size=3, replace=False).tolist())
    return FeatureBag(features=rng.normal(size=(k, f)), anchor_pos=anchors)


def make_cohort(
    rng: np.random.Generator, n: int, censor_fraction: float = 0.3
) -> list[SurvivalLabel]:
    times = rng.exponential(scale=10.0, size=n) + 1e-3
    events = rng.random(n) >= censor_fraction
    if not events.any():
        events[0] = True
    return [SurvivalLabel(time=float(t), event=bool(e)) for t, e in zip(times, events)]


@pytest.fixture
def np_rng() -> np.random.Generator:
    return np.random.default_rng(20240817)
