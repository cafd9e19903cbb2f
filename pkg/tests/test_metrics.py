import math

import numpy as np
import pytest

from anchorsurv.errors import InputError, NumericalError
from anchorsurv.metrics import (
    HIGH,
    LOW,
    RiskGroup,
    c_index,
    hazard_ratio,
    majority_vote,
    median_split,
)
from anchorsurv.survival import SurvivalLabel

from conftest import make_cohort


def c_index_oracle(risks, labels) -> float:
    """Pair-by-pair concordance enumeration, no vectorization."""
    concordant = 0.0
    comparable = 0
    n = len(risks)
    for i in range(n):
        for j in range(n):
            if labels[i].event and labels[i].time < labels[j].time:
                comparable += 1
                if risks[i] > risks[j]:
                    concordant += 1.0
                elif risks[i] == risks[j]:
                    concordant += 0.5
    return concordant / comparable


def group_ll_oracle(beta, high_mask, labels) -> float:
    """Partial log likelihood of the group indicator, risk sets by brute force."""
    total = 0.0
    n = len(labels)
    for i in range(n):
        if labels[i].event:
            denom = sum(
                math.exp(beta * high_mask[j]) for j in range(n) if labels[j].time >= labels[i].time
            )
            total += beta * high_mask[i] - math.log(denom)
    return total


def group_ll_grid_oracle(grid, high_mask, labels) -> np.ndarray:
    """group_ll_oracle evaluated over a grid of coefficients.

    Risk-set sizes come from the same brute-force pair scan; only the
    per-beta evaluation is vectorized so a dense grid stays affordable.
    """
    n = len(labels)
    x, n_high, n_low = [], [], []
    for i in range(n):
        if labels[i].event:
            at_risk = [j for j in range(n) if labels[j].time >= labels[i].time]
            x.append(high_mask[i])
            n_high.append(sum(high_mask[j] for j in at_risk))
            n_low.append(len(at_risk) - n_high[-1])
    x = np.array(x, dtype=float)
    n_high = np.array(n_high, dtype=float)
    n_low = np.array(n_low, dtype=float)
    grid = np.asarray(grid, dtype=float)
    eb = np.exp(grid)[:, None]
    return grid * x.sum() - np.log(n_low[None, :] + n_high[None, :] * eb).sum(axis=1)


class TestCIndex:
    def test_perfectly_ranked(self):
        labels = [SurvivalLabel(float(t), True) for t in (1, 2, 3)]
        assert c_index([3.0, 2.0, 1.0], labels) == 1.0
        assert c_index([1.0, 2.0, 3.0], labels) == 0.0

    def test_constant_risks_score_half(self, np_rng):
        labels = make_cohort(np_rng, 20)
        assert c_index(np.zeros(20), labels) == 0.5

    def test_hand_counted_with_censoring_and_ties(self):
        labels = [
            SurvivalLabel(1.0, True),
            SurvivalLabel(2.0, True),
            SurvivalLabel(2.0, False),
            SurvivalLabel(3.0, False),
        ]
        # comparable: (0,1) (0,2) (0,3) (1,3); the last is a risk tie
        assert c_index([5.0, 4.0, 4.0, 4.0], labels) == (3 + 0.5) / 4

    def test_matches_pair_loop_oracle(self, np_rng):
        for _ in range(20):
            n = int(np_rng.integers(10, 80))
            labels = make_cohort(np_rng, n)
            # integer-valued risks force plenty of exact ties
            risks = np_rng.integers(0, 5, size=n).astype(float)
            assert c_index(risks, labels) == c_index_oracle(risks, labels)

    def test_invariant_under_monotone_transforms(self, np_rng):
        labels = make_cohort(np_rng, 40)
        risks = np_rng.normal(size=40)
        base = c_index(risks, labels)
        assert c_index(2.0 * risks + 7.0, labels) == base
        assert c_index(risks**3, labels) == base

    def test_negation_complements_when_risks_distinct(self, np_rng):
        labels = make_cohort(np_rng, 30)
        risks = np_rng.permutation(np.arange(30, dtype=float))
        assert c_index(risks, labels) + c_index(-risks, labels) == 1.0

    def test_input_validation(self):
        with pytest.raises(InputError):
            c_index([1.0], [SurvivalLabel(1.0, True)])
        with pytest.raises(InputError):
            c_index([1.0, 2.0], [SurvivalLabel(1.0, True)])

    def test_undefined_without_comparable_pairs(self):
        censored = [SurvivalLabel(float(t), False) for t in (1, 2, 3)]
        with pytest.raises(NumericalError):
            c_index([1.0, 2.0, 3.0], censored)
        simultaneous = [SurvivalLabel(5.0, True) for _ in range(3)]
        with pytest.raises(NumericalError):
            c_index([1.0, 2.0, 3.0], simultaneous)


class TestMedianSplit:
    def test_threshold_and_strict_inequality(self):
        group = median_split([1.0, 2.0, 3.0], [2.5, 2.0, 1.9])
        assert group.threshold == 2.0
        assert group.assignment == (HIGH, LOW, LOW)

    def test_even_count_uses_central_mean(self):
        group = median_split([1.0, 2.0, 3.0, 4.0], [2.5])
        assert group.threshold == 2.5
        assert group.assignment == (LOW,)

    def test_self_split_sizes_on_distinct_risks(self, np_rng):
        for n in (7, 8, 15, 20):
            risks = np_rng.permutation(np.arange(n, dtype=float))
            group = median_split(risks, risks)
            n_high = int(group.high_mask().sum())
            # the median itself lands low, so odd counts lean low
            assert n_high == n // 2

    def test_rejects_empty_training_risks(self):
        with pytest.raises(InputError):
            median_split([], [1.0])

    def test_group_label_validation(self):
        with pytest.raises(InputError):
            RiskGroup(assignment=("high", "middle"), threshold=0.0)
        with pytest.raises(InputError):
            RiskGroup(assignment=(HIGH,), threshold=math.nan)


class TestMajorityVote:
    def vote(self, columns, thresholds=None):
        thresholds = thresholds or [0.0] * len(columns)
        return majority_vote(
            [RiskGroup(assignment=tuple(col), threshold=th) for col, th in zip(columns, thresholds)]
        )

    def test_simple_majority(self):
        out = self.vote([(HIGH,), (HIGH,), (LOW,), (HIGH,), (LOW,)])
        assert out.assignment == (HIGH,)

    def test_unanimous(self):
        assert self.vote([(LOW,), (LOW,), (LOW,)]).assignment == (LOW,)
        assert self.vote([(HIGH,), (HIGH,)]).assignment == (HIGH,)

    def test_even_tie_goes_high(self):
        out = self.vote([(HIGH, LOW), (LOW, HIGH), (HIGH, LOW), (LOW, HIGH)])
        assert out.assignment == (HIGH, HIGH)

    def test_matches_tally_oracle(self, np_rng):
        for _ in range(20):
            n_folds = int(np_rng.integers(1, 8))
            n = int(np_rng.integers(1, 30))
            matrix = np_rng.integers(0, 2, size=(n_folds, n))
            out = self.vote([tuple(HIGH if v else LOW for v in row) for row in matrix])
            for p in range(n):
                votes = int(matrix[:, p].sum())
                expected = HIGH if votes >= n_folds - votes else LOW
                assert out.assignment[p] == expected

    def test_threshold_is_median_of_folds(self):
        out = self.vote([(LOW,)] * 3, thresholds=[1.0, 5.0, 2.0])
        assert out.threshold == 2.0

    def test_rejects_empty_and_ragged(self):
        with pytest.raises(InputError):
            majority_vote([])
        with pytest.raises(InputError):
            majority_vote(
                [
                    RiskGroup(assignment=(HIGH, LOW), threshold=0.0),
                    RiskGroup(assignment=(HIGH,), threshold=0.0),
                ]
            )


def random_grouped_cohort(np_rng, n, high_rate=2.0, censor_fraction=0.2):
    """Exponential survival with a rate jump for the high group."""
    high = np_rng.integers(0, 2, size=n).astype(bool)
    if not high.any():
        high[0] = True
    if high.all():
        high[0] = False
    labels = []
    for h in high:
        rate = high_rate if h else 1.0
        t = float(np_rng.exponential(1.0 / rate)) + 1e-12
        event = bool(np_rng.random() >= censor_fraction)
        labels.append(SurvivalLabel(time=t, event=event))
    if not any(lab.event and high[i] for i, lab in enumerate(labels)):
        labels[int(np.flatnonzero(high)[0])] = SurvivalLabel(time=0.5, event=True)
    if not any(lab.event and not high[i] for i, lab in enumerate(labels)):
        labels[int(np.flatnonzero(~high)[0])] = SurvivalLabel(time=0.5, event=True)
    group = RiskGroup(
        assignment=tuple(HIGH if h else LOW for h in high), threshold=0.0
    )
    return group, labels


class TestHazardRatio:
    def test_mirrored_groups_fit_exactly_zero(self):
        labels = [
            SurvivalLabel(1.0, True),
            SurvivalLabel(1.0, True),
            SurvivalLabel(3.0, True),
            SurvivalLabel(3.0, True),
            SurvivalLabel(7.0, False),
            SurvivalLabel(7.0, False),
        ]
        group = RiskGroup(assignment=(HIGH, LOW, HIGH, LOW, HIGH, LOW), threshold=0.0)
        fit = hazard_ratio(group, labels)
        assert fit.converged
        assert fit.beta == 0.0
        assert abs(fit.beta) < 1e-8
        assert fit.hr == 1.0

    def test_newton_agrees_with_grid_search(self, np_rng):
        for _ in range(5):
            group, labels = random_grouped_cohort(np_rng, 60)
            fit = hazard_ratio(group, labels)
            assert fit.converged
            mask = group.high_mask().astype(float)
            grid = np.arange(-3.0, 3.0, 1e-4)
            values = group_ll_grid_oracle(grid, mask, labels)
            best = grid[int(np.argmax(values))]
            assert abs(fit.beta - best) < 1e-3
            # spot-check the vectorized grid against the scalar oracle
            assert values[30000] == pytest.approx(group_ll_oracle(grid[30000], mask, labels), abs=1e-9)

    def test_likelihood_trace_never_decreases(self, np_rng):
        for _ in range(10):
            group, labels = random_grouped_cohort(np_rng, 40)
            fit = hazard_ratio(group, labels)
            for before, after in zip(fit.ll_trace, fit.ll_trace[1:]):
                assert after >= before - 1e-9

    def test_fit_improves_on_null(self, np_rng):
        group, labels = random_grouped_cohort(np_rng, 80)
        fit = hazard_ratio(group, labels)
        mask = group.high_mask().astype(float)
        assert group_ll_oracle(fit.beta, mask, labels) >= group_ll_oracle(0.0, mask, labels)

    def test_exponential_simulation_recovers_doubled_hazard(self):
        rng = np.random.default_rng(77)
        n = 2000
        high = np.arange(n) % 2 == 0
        labels = [
            SurvivalLabel(time=float(rng.exponential(0.5 if h else 1.0)) + 1e-12, event=True)
            for h in high
        ]
        group = RiskGroup(assignment=tuple(HIGH if h else LOW for h in high), threshold=0.0)
        fit = hazard_ratio(group, labels)
        assert fit.converged
        assert 1.8 <= fit.hr <= 2.2

    def test_separation_reported_not_raised(self):
        labels = [
            SurvivalLabel(1.0, False),
            SurvivalLabel(2.0, True),
            SurvivalLabel(3.0, False),
            SurvivalLabel(4.0, True),
        ]
        group = RiskGroup(assignment=(HIGH, LOW, HIGH, LOW), threshold=0.0)
        fit = hazard_ratio(group, labels)
        assert not fit.converged
        assert math.isnan(fit.beta) and math.isnan(fit.hr)
        assert "high" in fit.diagnostic

    def test_converged_fit_is_consistent(self, np_rng):
        group, labels = random_grouped_cohort(np_rng, 50)
        fit = hazard_ratio(group, labels)
        assert fit.converged
        assert fit.hr == math.exp(fit.beta)
        assert 1 <= fit.iterations <= 20
        assert fit.diagnostic is None

    def test_input_validation(self):
        labels = [SurvivalLabel(1.0, True), SurvivalLabel(2.0, True)]
        with pytest.raises(InputError):
            hazard_ratio(RiskGroup(assignment=(HIGH, HIGH), threshold=0.0), labels)
        with pytest.raises(InputError):
            hazard_ratio(RiskGroup(assignment=(HIGH,), threshold=0.0), labels)
        censored = [SurvivalLabel(1.0, False), SurvivalLabel(2.0, False)]
        with pytest.raises(InputError):
            hazard_ratio(RiskGroup(assignment=(HIGH, LOW), threshold=0.0), censored)
