import dataclasses
import json
import statistics
from pathlib import Path

import numpy as np
import pytest

from anchorsurv.aggregation import FeatureBag, write_fvec
from anchorsurv.errors import InputError
from anchorsurv.harness import (
    NATIVE,
    ExperimentResult,
    FoldRecord,
    SplitPlan,
    SynthConfig,
    VotedRecord,
    load_bags,
    load_manifest,
    report,
    result_from_json,
    result_to_json,
    run_cv,
    stratified_split,
    synth_generate,
    trim_bag,
    write_manifest,
)
from anchorsurv.metrics import c_index
from anchorsurv.optim import TrainConfig
from anchorsurv.survival import ModelDims

from conftest import make_bag


def small_cohort(tmp_path, n=24, k=6, f=4, seed=3, censor=0.3) -> Path:
    cfg = SynthConfig(
        n_patients=n, n_slices=k, n_features=f, censor_target=censor, anchor_boost=1.0, seed=seed
    )
    return synth_generate(cfg, tmp_path)


class TestManifest:
    def test_round_trip(self, tmp_path):
        feat = tmp_path / "a.fvec"
        feat.write_bytes(b"placeholder")
        write_manifest(
            tmp_path / "m.csv",
            [("p1", 3.5, True, "a.fvec"), ("p2", 0.1234567890123456789, False, "a.fvec")],
        )
        rows = load_manifest(tmp_path / "m.csv")
        assert [r.patient_id for r in rows] == ["p1", "p2"]
        assert rows[0].time == 3.5 and rows[0].event is True
        assert rows[1].time == 0.1234567890123456789 and rows[1].event is False
        # relative feature paths resolve against the manifest directory
        assert rows[0].feature_path == feat

    def test_missing_file(self, tmp_path):
        with pytest.raises(InputError):
            load_manifest(tmp_path / "nope.csv")

    def test_missing_columns(self, tmp_path):
        (tmp_path / "m.csv").write_text("patient_id,time\np1,2.0\n")
        with pytest.raises(InputError, match="missing columns"):
            load_manifest(tmp_path / "m.csv")

    def test_duplicate_ids(self, tmp_path):
        feat = tmp_path / "a.fvec"
        feat.write_bytes(b"x")
        write_manifest(tmp_path / "m.csv", [("p1", 1.0, True, "a.fvec"), ("p1", 2.0, False, "a.fvec")])
        with pytest.raises(InputError, match="duplicate"):
            load_manifest(tmp_path / "m.csv")

    def test_missing_feature_file(self, tmp_path):
        write_manifest(tmp_path / "m.csv", [("p1", 1.0, True, "gone.fvec")])
        with pytest.raises(InputError, match="not found"):
            load_manifest(tmp_path / "m.csv")

    def test_header_only_rejected(self, tmp_path):
        (tmp_path / "m.csv").write_text("patient_id,time,event,feature_path\n")
        with pytest.raises(InputError, match="no rows"):
            load_manifest(tmp_path / "m.csv")

    def test_unparseable_time(self, tmp_path):
        feat = tmp_path / "a.fvec"
        feat.write_bytes(b"x")
        (tmp_path / "m.csv").write_text(
            "patient_id,time,event,feature_path\np1,soon,1,a.fvec\n"
        )
        with pytest.raises(InputError):
            load_manifest(tmp_path / "m.csv")


class TestStratifiedSplit:
    def make_rows(self, tmp_path, n, n_events):
        feat = tmp_path / "f.fvec"
        feat.write_bytes(b"x")
        write_manifest(
            tmp_path / "m.csv",
            [(f"p{i:03d}", float(i + 1), i < n_events, "f.fvec") for i in range(n)],
        )
        return load_manifest(tmp_path / "m.csv")

    def test_reference_sizes(self, tmp_path):
        rows = self.make_rows(tmp_path, 326, 200)
        plan = stratified_split(rows, test_fraction=0.15, n_folds=5, seed=11)
        assert len(plan.test_ids) == 49
        assert sum(len(f) for f in plan.folds) == 326 - 49
        assert len(plan.folds) == 5

    def test_partition_property(self, tmp_path):
        rows = self.make_rows(tmp_path, 60, 35)
        plan = stratified_split(rows, test_fraction=0.2, n_folds=4, seed=2)
        buckets = [plan.test_ids, *plan.folds]
        everything = [pid for b in buckets for pid in b]
        assert sorted(everything) == sorted(r.patient_id for r in rows)
        assert len(set(everything)) == len(everything)

    def test_event_stratification(self, tmp_path):
        rows = self.make_rows(tmp_path, 120, 70)
        events = {r.patient_id for r in rows if r.event}
        plan = stratified_split(rows, test_fraction=0.25, n_folds=3, seed=4)
        n_test_ev = len(events & set(plan.test_ids))
        # test bucket takes the rounded share of events
        assert n_test_ev == int(70 * 0.25 + 0.5)
        fold_ev = [len(events & set(f)) for f in plan.folds]
        assert max(fold_ev) - min(fold_ev) <= 1
        assert min(fold_ev) >= 1
        fold_sizes = [len(f) for f in plan.folds]
        assert max(fold_sizes) - min(fold_sizes) <= 1

    def test_deterministic_in_seed(self, tmp_path):
        rows = self.make_rows(tmp_path, 50, 30)
        assert stratified_split(rows, 0.2, 3, seed=7) == stratified_split(rows, 0.2, 3, seed=7)
        assert stratified_split(rows, 0.2, 3, seed=7) != stratified_split(rows, 0.2, 3, seed=8)

    def test_zero_test_fraction(self, tmp_path):
        rows = self.make_rows(tmp_path, 20, 10)
        plan = stratified_split(rows, 0.0, 2, seed=1)
        assert plan.test_ids == ()

    def test_too_few_events(self, tmp_path):
        rows = self.make_rows(tmp_path, 20, 2)
        with pytest.raises(InputError, match="event"):
            stratified_split(rows, 0.5, 4, seed=0)

    def test_parameter_validation(self, tmp_path):
        rows = self.make_rows(tmp_path, 10, 5)
        with pytest.raises(InputError):
            stratified_split(rows, 1.0, 2, seed=0)
        with pytest.raises(InputError):
            stratified_split(rows, 0.2, 0, seed=0)


class TestSynth:
    def test_byte_identical_across_runs(self, tmp_path):
        cfg = SynthConfig(n_patients=12, n_slices=6, n_features=3, seed=42)
        m1 = synth_generate(cfg, tmp_path / "one")
        m2 = synth_generate(cfg, tmp_path / "two")
        files1 = sorted(p.name for p in (tmp_path / "one").iterdir())
        files2 = sorted(p.name for p in (tmp_path / "two").iterdir())
        assert files1 == files2
        for name in files1:
            assert (tmp_path / "one" / name).read_bytes() == (tmp_path / "two" / name).read_bytes()
        assert m1.name == m2.name == "manifest.csv"

    def test_seed_changes_output(self, tmp_path):
        cfg = SynthConfig(n_patients=5, n_slices=6, n_features=3, seed=1)
        synth_generate(cfg, tmp_path / "a")
        synth_generate(dataclasses.replace(cfg, seed=2), tmp_path / "b")
        assert (tmp_path / "a" / "manifest.csv").read_bytes() != (
            tmp_path / "b" / "manifest.csv"
        ).read_bytes()

    def test_censoring_calibrated(self, tmp_path):
        cfg = SynthConfig(n_patients=1000, n_slices=6, n_features=3, censor_target=0.3, seed=5)
        rows = load_manifest(synth_generate(cfg, tmp_path))
        censored = sum(not r.event for r in rows) / len(rows)
        assert abs(censored - 0.3) < 0.05

    def test_zero_censor_target_keeps_all_events(self, tmp_path):
        cfg = SynthConfig(n_patients=30, n_slices=9, n_features=3, censor_target=0.0, seed=5)
        rows = load_manifest(synth_generate(cfg, tmp_path))
        assert all(r.event for r in rows)

    def test_anchor_positions_are_block_centers(self, tmp_path):
        for k, expected in ((3, (0, 1, 2)), (9, (1, 4, 7)), (12, (1, 5, 9))):
            cfg = SynthConfig(n_patients=2, n_slices=k, n_features=3, seed=1)
            bags, _ = load_bags(load_manifest(synth_generate(cfg, tmp_path / f"k{k}")))
            assert bags[0].anchor_pos == expected

    def test_latent_signal_is_recoverable(self, tmp_path):
        cfg = SynthConfig(
            n_patients=200,
            n_slices=12,
            n_features=5,
            signal_dim=2,
            censor_target=0.3,
            anchor_boost=2.0,
            seed=99,
        )
        bags, labels = load_bags(load_manifest(synth_generate(cfg, tmp_path)))
        anchors = list(bags[0].anchor_pos)
        rest = [i for i in range(12) if i not in anchors]
        # averaging the signal column over plain slices estimates the latent
        est = np.array([b.features[rest, 2].mean() for b in bags])
        assert c_index(est, labels) >= 0.70
        # anchor slices carry the extra boosted copy of the same latent
        extra = np.array([b.features[anchors, 2].mean() - e for b, e in zip(bags, est)])
        assert np.corrcoef(extra, est)[0, 1] > 0.6

    def test_config_sidecar_matches(self, tmp_path):
        cfg = SynthConfig(n_patients=4, n_slices=6, n_features=3, seed=9)
        synth_generate(cfg, tmp_path)
        stored = json.loads((tmp_path / "synth_config.json").read_text())
        assert stored == dataclasses.asdict(cfg)

    def test_config_validation(self):
        with pytest.raises(InputError):
            SynthConfig(n_patients=0, n_slices=6, n_features=3)
        with pytest.raises(InputError):
            SynthConfig(n_patients=5, n_slices=2, n_features=3)
        with pytest.raises(InputError):
            SynthConfig(n_patients=5, n_slices=6, n_features=3, signal_dim=3)
        with pytest.raises(InputError):
            SynthConfig(n_patients=5, n_slices=6, n_features=3, censor_target=1.0)
        with pytest.raises(InputError):
            SynthConfig(n_patients=5, n_slices=6, n_features=3, anchor_boost=-0.5)


class TestTrimBag:
    def test_hand_oracle_k9_to_6(self, np_rng):
        bag = FeatureBag(features=np_rng.normal(size=(9, 3)), anchor_pos=(1, 4, 7))
        out = trim_bag(bag, 6)
        assert (out.features == bag.features[[0, 1, 3, 4, 6, 7]]).all()
        assert out.anchor_pos == (1, 3, 5)

    def test_hand_oracle_uneven_blocks(self, np_rng):
        # anchor 0 owns a single slice, so its quota spills to anchor 1
        bag = FeatureBag(features=np_rng.normal(size=(8, 3)), anchor_pos=(0, 1, 7))
        out = trim_bag(bag, 6)
        assert (out.features == bag.features[[0, 1, 2, 3, 6, 7]]).all()
        assert out.anchor_pos == (0, 1, 5)

    def test_anchors_only(self, np_rng):
        bag = FeatureBag(features=np_rng.normal(size=(9, 4)), anchor_pos=(1, 4, 7))
        out = trim_bag(bag, 3)
        assert (out.features == bag.features[[1, 4, 7]]).all()
        assert out.anchor_pos == (0, 1, 2)

    def test_identity_when_budget_matches(self, np_rng):
        bag = make_bag(np_rng, k=7, f=3)
        assert trim_bag(bag, 7) is bag

    def test_anchors_always_survive(self, np_rng):
        for _ in range(20):
            k = int(np_rng.integers(5, 16))
            bag = make_bag(np_rng, k=k, f=3)
            for target in range(3, k):
                out = trim_bag(bag, target)
                assert out.n_slices == target
                originals = {tuple(bag.features[a]) for a in bag.anchor_pos}
                kept = {tuple(out.features[a]) for a in out.anchor_pos}
                assert kept == originals

    def test_rows_come_from_source(self, np_rng):
        bag = make_bag(np_rng, k=10, f=4)
        out = trim_bag(bag, 5)
        source = {tuple(row) for row in bag.features}
        assert all(tuple(row) in source for row in out.features)

    def test_budget_validation(self, np_rng):
        bag = make_bag(np_rng, k=6, f=3)
        with pytest.raises(InputError):
            trim_bag(bag, 2)
        with pytest.raises(InputError):
            trim_bag(bag, 7)


def quick_cv(tmp_path, methods=("mean-cox",), k_values=(NATIVE,), workers=1, n=24, seed=3):
    manifest = small_cohort(tmp_path, n=n, seed=seed)
    rows = load_manifest(manifest)
    split = stratified_split(rows, test_fraction=0.2, n_folds=3, seed=seed)
    cfg = TrainConfig(epochs=3, lr=1e-2, seed=seed)
    result = run_cv(rows, split, list(methods), list(k_values), cfg, workers=workers)
    return rows, split, cfg, result


class TestRunCv:
    def test_record_shape(self, tmp_path):
        _, split, _, result = quick_cv(
            tmp_path, methods=("mean-cox", "daal-single"), k_values=(NATIVE, 4)
        )
        assert len(result.records) == 2 * 2 * 3
        assert len(result.voted) == 2 * 2
        assert result.k_labels == (NATIVE, "4")
        assert result.methods == ("mean-cox", "daal-single")
        for rec in result.records:
            assert rec.n_test == len(split.test_ids)
            assert rec.c_index is not None and 0.0 <= rec.c_index <= 1.0
            if rec.converged:
                assert rec.error is None and rec.hr > 0
            else:
                # a tiny test set can leave the group fit without information;
                # the concordance half of the cell still stands
                assert rec.hr is None and rec.beta is None and rec.error
            if rec.k_label == "4":
                assert rec.k_slices == 4

    def test_serial_rerun_identical(self, tmp_path):
        *_, r1 = quick_cv(tmp_path / "a")
        *_, r2 = quick_cv(tmp_path / "b")
        assert result_to_json(r1) == result_to_json(r2)

    def test_parallel_matches_serial(self, tmp_path):
        *_, serial = quick_cv(tmp_path / "a", methods=("mean-cox", "max-cox"), k_values=(NATIVE, 4))
        *_, threaded = quick_cv(
            tmp_path / "b", methods=("mean-cox", "max-cox"), k_values=(NATIVE, 4), workers=4
        )
        assert result_to_json(serial) == result_to_json(threaded)

    def test_cells_are_seed_isolated(self, tmp_path):
        rows, split, cfg, full = quick_cv(
            tmp_path, methods=("mean-cox", "max-cox"), k_values=(NATIVE, 4)
        )
        solo = run_cv(rows, split, ["max-cox"], [4], cfg)
        assert solo.records == full.cell("max-cox", "4")

    def test_failures_recorded_not_raised(self, tmp_path):
        # an all-censored test set leaves concordance undefined in every cell
        manifest = small_cohort(tmp_path, n=30, seed=6)
        rows = load_manifest(manifest)
        censored = [r.patient_id for r in rows if not r.event]
        assert len(censored) >= 3
        test_ids = tuple(censored[:3])
        rest = [r.patient_id for r in rows if r.patient_id not in test_ids]
        folds = (tuple(rest[0::2]), tuple(rest[1::2]))
        split = SplitPlan(test_ids=test_ids, folds=folds, seed=0)
        result = run_cv(rows, split, ["mean-cox"], [NATIVE], TrainConfig(epochs=2, lr=1e-2, seed=1))
        assert len(result.records) == 2
        for rec in result.records:
            assert rec.c_index is None
            assert "NumericalError" in rec.error
        assert result.voted[0].error == "all folds failed"

    def test_input_validation(self, tmp_path):
        rows, split, cfg, _ = quick_cv(tmp_path)
        with pytest.raises(InputError, match="unknown method"):
            run_cv(rows, split, ["cox"], [NATIVE], cfg)
        with pytest.raises(InputError, match="duplicate method"):
            run_cv(rows, split, ["mean-cox", "mean-cox"], [NATIVE], cfg)
        with pytest.raises(InputError, match="duplicate slice"):
            run_cv(rows, split, ["mean-cox"], [4, 4], cfg)
        with pytest.raises(InputError, match="test"):
            run_cv(rows, SplitPlan(test_ids=(), folds=split.folds, seed=0), ["mean-cox"], [NATIVE], cfg)
        with pytest.raises(InputError, match="2 folds"):
            run_cv(
                rows,
                SplitPlan(test_ids=split.test_ids, folds=split.folds[:1], seed=0),
                ["mean-cox"],
                [NATIVE],
                cfg,
            )
        with pytest.raises(InputError, match="overlap"):
            bad = SplitPlan(test_ids=split.test_ids, folds=(split.folds[0], split.folds[0]), seed=0)
            run_cv(rows, bad, ["mean-cox"], [NATIVE], cfg)
        with pytest.raises(InputError, match="unknown patient"):
            bad = SplitPlan(test_ids=("ghost",), folds=split.folds, seed=0)
            run_cv(rows, bad, ["mean-cox"], [NATIVE], cfg)

    def test_mixed_feature_dims_rejected(self, tmp_path, np_rng):
        write_fvec(tmp_path / "a.fvec", make_bag(np_rng, k=4, f=4))
        write_fvec(tmp_path / "b.fvec", make_bag(np_rng, k=4, f=5))
        write_manifest(
            tmp_path / "m.csv",
            [("pa", 1.0, True, "a.fvec"), ("pb", 2.0, True, "b.fvec"), ("pc", 3.0, True, "a.fvec"), ("pd", 4.0, True, "a.fvec")],
        )
        rows = load_manifest(tmp_path / "m.csv")
        split = SplitPlan(test_ids=("pa",), folds=(("pb",), ("pc", "pd")), seed=0)
        with pytest.raises(InputError, match="feature dimension"):
            run_cv(rows, split, ["mean-cox"], [NATIVE], TrainConfig(epochs=1, lr=1e-3, seed=0))


class TestResultSerialization:
    def test_json_round_trip(self, tmp_path):
        *_, result = quick_cv(tmp_path, methods=("mean-cox", "attn-mil"), k_values=(NATIVE, 4))
        clone = result_from_json(result_to_json(result))
        assert clone == result

    def test_malformed_json_rejected(self):
        with pytest.raises(InputError):
            result_from_json("{not json")
        with pytest.raises(InputError):
            result_from_json('{"methods": []}')

    def test_mean_std_uses_sample_std(self):
        recs = [
            FoldRecord(
                method="mean-cox",
                k_label=NATIVE,
                k_slices=6,
                fold=i,
                seed=i,
                n_test=5,
                c_index=v,
                hr=None,
                beta=None,
                converged=False,
                threshold=0.0,
                error=None,
            )
            for i, v in enumerate((0.6, 0.8, 0.7))
        ]
        result = ExperimentResult(
            methods=("mean-cox",),
            k_labels=(NATIVE,),
            master_seed=0,
            epochs=1,
            lr=0.1,
            records=recs,
            voted=[],
        )
        mean, std = result.mean_std("mean-cox", NATIVE)
        assert mean == pytest.approx(0.7)
        assert std == pytest.approx(statistics.stdev((0.6, 0.8, 0.7)))
        assert result.mean_std("mean-cox", "9") == (None, None)


class TestReport:
    def test_tables_and_figures(self, tmp_path):
        *_, result = quick_cv(tmp_path, methods=("mean-cox", "max-cox"), k_values=(NATIVE, 4))
        written = report(result, tmp_path / "out" / "table.csv")
        for key in ("mean", "std", "records", "cindex_figure", "hr_figure"):
            assert written[key].is_file() and written[key].stat().st_size > 0
        header = (tmp_path / "out" / "table.csv").read_text().splitlines()[0]
        assert header == "method,native,4"
        clone = result_from_json(written["records"].read_text())
        assert clone == result

    def test_figures_can_be_skipped(self, tmp_path):
        *_, result = quick_cv(tmp_path)
        written = report(result, tmp_path / "out" / "table.csv", figures=False)
        assert "cindex_figure" not in written
        assert not list((tmp_path / "out").glob("*.png"))

    def test_failed_cells_render_na(self, tmp_path):
        rec = FoldRecord(
            method="mean-cox",
            k_label=NATIVE,
            k_slices=None,
            fold=0,
            seed=0,
            n_test=4,
            c_index=None,
            hr=None,
            beta=None,
            converged=False,
            threshold=None,
            error="NumericalError: no comparable pairs",
        )
        voted = VotedRecord(
            method="mean-cox",
            k_label=NATIVE,
            hr=None,
            beta=None,
            converged=False,
            threshold=None,
            n_test=4,
            error="all folds failed",
        )
        result = ExperimentResult(
            methods=("mean-cox",),
            k_labels=(NATIVE,),
            master_seed=0,
            epochs=1,
            lr=0.1,
            records=[rec],
            voted=[voted],
        )
        written = report(result, tmp_path / "table.csv")
        lines = written["mean"].read_text().splitlines()
        assert lines[1] == "mean-cox,NA"
