"""Experiment orchestration: manifests, splits, synthetic cohorts, CV sweeps.

A cohort is a CSV manifest binding patient ids and survival labels to
FVEC feature files.  The harness stratifies the cohort into a held-out
test set plus k folds, trains every requested method at every requested
slice budget, and reports test concordance and voted hazard ratios in a
methods-by-K table.

Every (method, K, fold) cell derives its own seed from the master seed,
so cells are independent jobs and serial and parallel sweeps produce
identical tables.
"""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .aggregation import FeatureBag, read_fvec, write_fvec
from .errors import InputError, NumericalError
from .metrics import RiskGroup, c_index, hazard_ratio, majority_vote, median_split
from .numerics import Rng, derive_seed
from .optim import TrainConfig, train
from .survival import METHOD_KINDS, ModelDims, SurvivalLabel, cohort_risks, init_method

MANIFEST_COLUMNS = ("patient_id", "time", "event", "feature_path")
NATIVE = "native"


@dataclass(frozen=True)
class ManifestRow:
    patient_id: str
    time: float
    event: bool
    feature_path: Path


def load_manifest(path: str | Path) -> list[ManifestRow]:
    """Read a cohort manifest; feature paths resolve relative to the CSV."""
    path = Path(path)
    if not path.is_file():
        raise InputError(f"manifest not found: {path}")
    rows: list[ManifestRow] = []
    seen: set[str] = set()
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in MANIFEST_COLUMNS if c not in (reader.fieldnames or [])]
        if missing:
            raise InputError(f"{path}: manifest missing columns {missing}")
        for lineno, rec in enumerate(reader, start=2):
            pid = rec["patient_id"].strip()
            if not pid:
                raise InputError(f"{path}:{lineno}: empty patient_id")
            if pid in seen:
                raise InputError(f"{path}:{lineno}: duplicate patient_id {pid!r}")
            seen.add(pid)
            try:
                time = float(rec["time"])
                event = bool(int(rec["event"]))
            except ValueError as exc:
                raise InputError(f"{path}:{lineno}: {exc}")
            feat = Path(rec["feature_path"])
            if not feat.is_absolute():
                feat = path.parent / feat
            if not feat.is_file():
                raise InputError(f"{path}:{lineno}: feature file not found: {feat}")
            rows.append(ManifestRow(patient_id=pid, time=time, event=event, feature_path=feat))
    if not rows:
        raise InputError(f"{path}: manifest has no rows")
    return rows


def write_manifest(path: str | Path, rows: list[tuple[str, float, bool, str]]) -> None:
    """Write manifest rows of (patient_id, time, event, relative feature path)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_COLUMNS)
        for pid, time, event, feat in rows:
            writer.writerow([pid, repr(float(time)), int(event), feat])


def load_bags(rows: list[ManifestRow]) -> tuple[list[FeatureBag], list[SurvivalLabel]]:
    bags = [read_fvec(r.feature_path, patient_id=r.patient_id) for r in rows]
    labels = [SurvivalLabel(time=r.time, event=r.event) for r in rows]
    return bags, labels


# ---------------------------------------------------------------------------
# Stratified split


@dataclass(frozen=True)
class SplitPlan:
    """Held-out test ids plus disjoint folds covering the remainder."""

    test_ids: tuple[str, ...]
    folds: tuple[tuple[str, ...], ...]
    seed: int


def stratified_split(
    rows: list[ManifestRow], test_fraction: float, n_folds: int, seed: int
) -> SplitPlan:
    """Event-stratified test/fold partition.

    Events and censored patients are shuffled separately and dealt
    round-robin, test bucket first, so every bucket's event fraction
    stays within one patient of the global fraction.
    """
    if not 0.0 <= test_fraction < 1.0:
        raise InputError(f"test_fraction must be in [0, 1), got {test_fraction}")
    if n_folds < 1:
        raise InputError(f"n_folds must be >= 1, got {n_folds}")
    event_ids = [r.patient_id for r in rows if r.event]
    censored_ids = [r.patient_id for r in rows if not r.event]
    rng = Rng(derive_seed(seed, "split"))
    rng.shuffle(event_ids)
    rng.shuffle(censored_ids)

    n = len(rows)
    n_test = int(n * test_fraction + 0.5)
    n_test_ev = min(int(len(event_ids) * test_fraction + 0.5), n_test, len(event_ids))
    n_test_cen = n_test - n_test_ev
    if n_test_cen > len(censored_ids):
        n_test_cen = len(censored_ids)
        n_test_ev = n_test - n_test_cen
    test_ids = tuple(event_ids[:n_test_ev] + censored_ids[:n_test_cen])

    rem_events = event_ids[n_test_ev:]
    rem_censored = censored_ids[n_test_cen:]
    if len(rem_events) < n_folds:
        raise InputError(
            f"{len(rem_events)} non-test events cannot give every one of {n_folds} folds an event"
        )
    folds: list[list[str]] = [[] for _ in range(n_folds)]
    for i, pid in enumerate(rem_events):
        folds[i % n_folds].append(pid)
    offset = len(rem_events) % n_folds
    for i, pid in enumerate(rem_censored):
        folds[(offset + i) % n_folds].append(pid)
    return SplitPlan(test_ids=test_ids, folds=tuple(tuple(f) for f in folds), seed=seed)


# ---------------------------------------------------------------------------
# Synthetic planted-signal cohort


@dataclass(frozen=True)
class SynthConfig:
    """Planted-signal cohort: one latent hazard per patient, leaked into features.

    Feature vectors are unit Gaussian noise; the latent risk is added to
    one designated feature dimension on every slice, and anchor slices
    receive an extra anchor_boost times the latent on top, giving
    anchor-aware aggregators a detectable edge.  Event times are
    exponential with rate exp(latent); censoring times are exponential
    with a rate calibrated so the expected censored fraction matches
    censor_target.
    """

    n_patients: int
    n_slices: int
    n_features: int
    signal_dim: int = 0
    censor_target: float = 0.3
    anchor_boost: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.n_patients < 1:
            raise InputError(f"n_patients must be >= 1, got {self.n_patients}")
        if self.n_slices < 3:
            raise InputError(f"n_slices must be >= 3, got {self.n_slices}")
        if self.n_features < 1:
            raise InputError(f"n_features must be >= 1, got {self.n_features}")
        if not 0 <= self.signal_dim < self.n_features:
            raise InputError(f"signal_dim {self.signal_dim} outside [0, {self.n_features})")
        if not 0.0 <= self.censor_target < 1.0:
            raise InputError(f"censor_target must be in [0, 1), got {self.censor_target}")
        if self.anchor_boost < 0:
            raise InputError(f"anchor_boost must be >= 0, got {self.anchor_boost}")


def _synth_anchor_positions(k: int) -> tuple[int, int, int]:
    # centers of three even blocks of the slice list
    pos = []
    for b in range(3):
        start = b * k // 3
        end = (b + 1) * k // 3
        pos.append((start + end - 1) // 2)
    return tuple(pos)


def _calibrate_censor_rate(lambdas: np.ndarray, target: float) -> float:
    # P(censor before event) for one patient is c / (c + lambda); bisect the mean
    def mean_censored(c: float) -> float:
        return float(np.mean(c / (c + lambdas)))

    lo, hi = 1e-12, 1e12
    for _ in range(200):
        mid = math.sqrt(lo * hi)
        if mean_censored(mid) < target:
            lo = mid
        else:
            hi = mid
    return math.sqrt(lo * hi)


def synth_generate(cfg: SynthConfig, out_dir: str | Path) -> Path:
    """Write FVEC files plus manifest.csv; returns the manifest path.

    All draws come from one splitmix PRNG seeded by cfg.seed, so equal
    configs give byte-identical outputs.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = Rng(cfg.seed)
    anchors = _synth_anchor_positions(cfg.n_slices)
    latents = np.empty(cfg.n_patients)
    event_times = np.empty(cfg.n_patients)
    feature_files: list[str] = []
    for i in range(cfg.n_patients):
        latent = rng.normal()
        latents[i] = latent
        feats = np.empty((cfg.n_slices, cfg.n_features))
        flat = feats.reshape(-1)
        for j in range(flat.size):
            flat[j] = rng.normal()
        feats[:, cfg.signal_dim] += latent
        for a in anchors:
            feats[a, cfg.signal_dim] += cfg.anchor_boost * latent
        event_times[i] = rng.exponential(math.exp(latent))
        name = f"p{i:04d}.fvec"
        write_fvec(out / name, FeatureBag(features=feats, anchor_pos=anchors, patient_id=f"p{i:04d}"))
        feature_files.append(name)

    if cfg.censor_target > 0.0:
        censor_rate = _calibrate_censor_rate(np.exp(latents), cfg.censor_target)
        censor_times = np.array([rng.exponential(censor_rate) for _ in range(cfg.n_patients)])
        events = event_times <= censor_times
        times = np.minimum(event_times, censor_times)
    else:
        events = np.ones(cfg.n_patients, dtype=bool)
        times = event_times

    manifest_path = out / "manifest.csv"
    write_manifest(
        manifest_path,
        [
            (f"p{i:04d}", float(times[i]), bool(events[i]), feature_files[i])
            for i in range(cfg.n_patients)
        ],
    )
    with open(out / "synth_config.json", "w") as fh:
        json.dump(asdict(cfg), fh, indent=2, sort_keys=True)
    return manifest_path


# ---------------------------------------------------------------------------
# Slice-budget trimming


def trim_bag(bag: FeatureBag, k_target: int) -> FeatureBag:
    """Shrink a bag to k_target slices, keeping slices nearest their anchors.

    Slices are assigned to their nearest anchor (ties toward the earlier
    anchor), the budget is split as evenly as possible across the three
    anchors (earlier anchors take the remainder, overflow beyond a
    block's size spills to the others), and each anchor keeps itself plus
    neighbors expanding left-first.  Anchors always survive.
    """
    k = bag.n_slices
    if k_target == k:
        return bag
    if k_target < 3:
        raise InputError(f"slice budget must be >= 3, got {k_target}")
    if k_target > k:
        raise InputError(f"cannot trim a {k}-slice bag up to {k_target} slices")

    order = sorted(range(3), key=lambda p: bag.anchor_pos[p])
    anchors = [bag.anchor_pos[p] for p in order]
    owner = []
    for i in range(k):
        dists = [abs(i - a) for a in anchors]
        owner.append(dists.index(min(dists)))
    caps = [owner.count(j) for j in range(3)]

    base, rem = divmod(k_target, 3)
    quota = [base + (1 if j < rem else 0) for j in range(3)]
    while True:
        overflow = sum(max(quota[j] - caps[j], 0) for j in range(3))
        if overflow == 0:
            break
        quota = [min(quota[j], caps[j]) for j in range(3)]
        for j in range(3):
            if overflow == 0:
                break
            add = min(caps[j] - quota[j], overflow)
            quota[j] += add
            overflow -= add

    selected: list[int] = []
    for j, anchor in enumerate(anchors):
        block = [i for i in range(k) if owner[i] == j]
        lo, hi = block[0], block[-1]
        picks = [anchor]
        d = 1
        while len(picks) < quota[j]:
            if anchor - d >= lo:
                picks.append(anchor - d)
            if len(picks) < quota[j] and anchor + d <= hi:
                picks.append(anchor + d)
            d += 1
        selected.extend(picks)
    selected.sort()
    position = {idx: i for i, idx in enumerate(selected)}
    return FeatureBag(
        features=bag.features[selected],
        anchor_pos=tuple(position[a] for a in bag.anchor_pos),
        patient_id=bag.patient_id,
    )


# ---------------------------------------------------------------------------
# Cross-validation sweep


@dataclass
class FoldRecord:
    """One (method, K, fold) cell: test concordance and the fold's risk grouping."""

    method: str
    k_label: str
    k_slices: int | None
    fold: int
    seed: int
    n_test: int
    c_index: float | None
    hr: float | None
    beta: float | None
    converged: bool
    threshold: float | None
    error: str | None


@dataclass
class VotedRecord:
    """Majority-voted risk grouping per (method, K), with its hazard ratio."""

    method: str
    k_label: str
    hr: float | None
    beta: float | None
    converged: bool
    threshold: float | None
    n_test: int
    error: str | None


@dataclass
class ExperimentResult:
    methods: tuple[str, ...]
    k_labels: tuple[str, ...]
    master_seed: int
    epochs: int
    lr: float
    records: list[FoldRecord]
    voted: list[VotedRecord]

    def cell(self, method: str, k_label: str) -> list[FoldRecord]:
        return [r for r in self.records if r.method == method and r.k_label == k_label]

    def mean_std(self, method: str, k_label: str) -> tuple[float | None, float | None]:
        """Mean and sample std of the fold test concordances (None if all failed)."""
        vals = [r.c_index for r in self.cell(method, k_label) if r.c_index is not None]
        if not vals:
            return None, None
        mean = float(np.mean(vals))
        std = float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0
        return mean, std


def result_to_json(result: ExperimentResult) -> str:
    payload = {
        "methods": list(result.methods),
        "k_labels": list(result.k_labels),
        "master_seed": result.master_seed,
        "epochs": result.epochs,
        "lr": result.lr,
        "records": [asdict(r) for r in result.records],
        "voted": [asdict(v) for v in result.voted],
    }
    return json.dumps(payload, indent=2, sort_keys=True)


def result_from_json(text: str) -> ExperimentResult:
    try:
        payload = json.loads(text)
        return ExperimentResult(
            methods=tuple(payload["methods"]),
            k_labels=tuple(payload["k_labels"]),
            master_seed=payload["master_seed"],
            epochs=payload["epochs"],
            lr=payload["lr"],
            records=[FoldRecord(**r) for r in payload["records"]],
            voted=[VotedRecord(**v) for v in payload["voted"]],
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise InputError(f"malformed results JSON: {exc}")


def _resolve_k(bags: list[FeatureBag], k_value) -> tuple[str, int | None]:
    if k_value == NATIVE:
        sizes = {bag.n_slices for bag in bags}
        return NATIVE, sizes.pop() if len(sizes) == 1 else None
    return str(int(k_value)), int(k_value)


def _run_cell(
    kind: str,
    k_label: str,
    k_slices: int | None,
    fold: int,
    seed: int,
    train_bags,
    train_labels,
    val_bags,
    val_labels,
    test_bags,
    test_labels,
    cfg: TrainConfig,
    dims: ModelDims,
    train_through_max: bool,
) -> tuple[FoldRecord, RiskGroup | None]:
    try:
        method = init_method(kind, dims, Rng(seed), train_through_max=train_through_max)
        fit = train(method, train_bags, train_labels, cfg, val_bags=val_bags, val_labels=val_labels)
        test_risks, _ = cohort_risks(fit.method, test_bags)
        ci = float(c_index(test_risks, test_labels))
        train_risks, _ = cohort_risks(fit.method, train_bags)
        group = median_split(train_risks, test_risks)
    except (InputError, NumericalError) as exc:
        record = FoldRecord(
            method=kind,
            k_label=k_label,
            k_slices=k_slices,
            fold=fold,
            seed=seed,
            n_test=len(test_bags),
            c_index=None,
            hr=None,
            beta=None,
            converged=False,
            threshold=None,
            error=f"{type(exc).__name__}: {exc}",
        )
        return record, None
    # the group fit can degenerate (e.g. every test patient on one side of
    # the median) without invalidating the concordance half of the cell
    hr = beta = None
    converged = False
    error = None
    try:
        hr_fit = hazard_ratio(group, test_labels)
        converged = hr_fit.converged
        if converged:
            hr, beta = hr_fit.hr, hr_fit.beta
        else:
            error = hr_fit.diagnostic
    except (InputError, NumericalError) as exc:
        error = f"{type(exc).__name__}: {exc}"
    record = FoldRecord(
        method=kind,
        k_label=k_label,
        k_slices=k_slices,
        fold=fold,
        seed=seed,
        n_test=len(test_bags),
        c_index=ci,
        hr=hr,
        beta=beta,
        converged=converged,
        threshold=group.threshold,
        error=error,
    )
    return record, group


def run_cv(
    rows: list[ManifestRow],
    split: SplitPlan,
    methods: list[str],
    k_values: list,
    train_cfg: TrainConfig,
    dims: ModelDims | None = None,
    train_through_max: bool = True,
    workers: int = 1,
) -> ExperimentResult:
    """Sweep methods x slice budgets over the fold plan.

    Per cell and fold: train on the other folds, select the snapshot by
    validation concordance on the held-out fold, and score the fixed test
    set.  Risk groups are assigned per fold by the training-median split,
    then majority-voted per cell; the reported hazard ratio is fitted on
    the voted groups.  Failures are recorded per cell without aborting
    the sweep.
    """
    for kind in methods:
        if kind not in METHOD_KINDS:
            raise InputError(f"unknown method kind {kind!r}; expected one of {METHOD_KINDS}")
    if len(set(methods)) != len(methods):
        raise InputError("duplicate method kinds requested")
    labels_requested = [str(k) for k in k_values]
    if len(set(labels_requested)) != len(labels_requested):
        raise InputError("duplicate slice budgets requested")
    if not split.test_ids:
        raise InputError("split has no test patients")
    if len(split.folds) < 2:
        raise InputError("cross validation needs at least 2 folds")
    fold_sets = [set(f) for f in split.folds]
    test_set = set(split.test_ids)
    for i, fs in enumerate(fold_sets):
        if fs & test_set:
            raise InputError(f"fold {i} overlaps the test set: {sorted(fs & test_set)}")
        for j in range(i + 1, len(fold_sets)):
            if fs & fold_sets[j]:
                raise InputError(f"folds {i} and {j} overlap: {sorted(fs & fold_sets[j])}")

    by_id = {r.patient_id: r for r in rows}
    missing = (test_set | set().union(*fold_sets)) - set(by_id)
    if missing:
        raise InputError(f"split references unknown patient ids: {sorted(missing)}")

    def rows_for(ids) -> list[ManifestRow]:
        return [by_id[pid] for pid in ids]

    all_bags: dict[str, FeatureBag] = {}
    all_labels: dict[str, SurvivalLabel] = {}
    for subset in [split.test_ids, *split.folds]:
        bags, labels = load_bags(rows_for(subset))
        for pid, bag, lab in zip(subset, bags, labels):
            all_bags[pid] = bag
            all_labels[pid] = lab

    n_features = {bag.n_features for bag in all_bags.values()}
    if len(n_features) != 1:
        raise InputError(f"bags disagree on feature dimension: {sorted(n_features)}")
    dims = dims or ModelDims(n_features=n_features.pop())

    budgets = []  # one (k_label, k_slices, trimmed bag dict) per requested budget
    for k_value in k_values:
        k_label, k_slices = _resolve_k(list(all_bags.values()), k_value)
        if k_label != NATIVE:
            trimmed = {pid: trim_bag(bag, k_slices) for pid, bag in all_bags.items()}
        else:
            trimmed = all_bags
        budgets.append((k_label, k_slices, trimmed))

    jobs = []
    for kind in methods:
        for k_label, k_slices, trimmed in budgets:
            test_bags = [trimmed[pid] for pid in split.test_ids]
            test_labels = [all_labels[pid] for pid in split.test_ids]
            for fold in range(len(split.folds)):
                val_ids = split.folds[fold]
                train_ids = [pid for f, ids in enumerate(split.folds) if f != fold for pid in ids]
                seed = derive_seed(train_cfg.seed, kind, k_label, fold)
                cfg = TrainConfig(epochs=train_cfg.epochs, lr=train_cfg.lr, seed=seed)
                jobs.append(
                    (
                        (kind, k_label, fold),
                        (
                            kind,
                            k_label,
                            k_slices,
                            fold,
                            seed,
                            [trimmed[pid] for pid in train_ids],
                            [all_labels[pid] for pid in train_ids],
                            [trimmed[pid] for pid in val_ids],
                            [all_labels[pid] for pid in val_ids],
                            test_bags,
                            test_labels,
                            cfg,
                            dims,
                            train_through_max,
                        ),
                    )
                )

    outcomes: dict[tuple, tuple[FoldRecord, RiskGroup | None]] = {}
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = {key: pool.submit(_run_cell, *args) for key, args in jobs}
            for key, fut in futures.items():
                outcomes[key] = fut.result()
    else:
        for key, args in jobs:
            outcomes[key] = _run_cell(*args)

    records: list[FoldRecord] = []
    voted: list[VotedRecord] = []
    k_labels_seen: list[str] = []
    for kind in methods:
        for k_label, _, _ in budgets:
            if k_label not in k_labels_seen:
                k_labels_seen.append(k_label)
            cell_groups: list[RiskGroup] = []
            for fold in range(len(split.folds)):
                record, group = outcomes[(kind, k_label, fold)]
                records.append(record)
                if group is not None:
                    cell_groups.append(group)
            test_labels = [all_labels[pid] for pid in split.test_ids]
            if cell_groups:
                final = majority_vote(cell_groups)
                try:
                    fit = hazard_ratio(final, test_labels)
                    voted.append(
                        VotedRecord(
                            method=kind,
                            k_label=k_label,
                            hr=fit.hr if fit.converged else None,
                            beta=fit.beta if fit.converged else None,
                            converged=fit.converged,
                            threshold=final.threshold,
                            n_test=len(split.test_ids),
                            error=None if fit.converged else fit.diagnostic,
                        )
                    )
                except (InputError, NumericalError) as exc:
                    voted.append(
                        VotedRecord(
                            method=kind,
                            k_label=k_label,
                            hr=None,
                            beta=None,
                            converged=False,
                            threshold=final.threshold,
                            n_test=len(split.test_ids),
                            error=f"{type(exc).__name__}: {exc}",
                        )
                    )
            else:
                voted.append(
                    VotedRecord(
                        method=kind,
                        k_label=k_label,
                        hr=None,
                        beta=None,
                        converged=False,
                        threshold=None,
                        n_test=len(split.test_ids),
                        error="all folds failed",
                    )
                )
    return ExperimentResult(
        methods=tuple(methods),
        k_labels=tuple(k_labels_seen),
        master_seed=train_cfg.seed,
        epochs=train_cfg.epochs,
        lr=train_cfg.lr,
        records=records,
        voted=voted,
    )


# ---------------------------------------------------------------------------
# Reporting


def report(result: ExperimentResult, out_csv: str | Path, figures: bool = True) -> dict[str, Path]:
    """Render the sweep: mean and std CSV tables, per-fold JSON, figures.

    Cells where every fold failed render as NA.  Figures (test
    concordance vs slice budget, voted hazard ratios) land next to the
    CSV; pass figures=False to skip them.
    """
    out_csv = Path(out_csv)
    out_csv.parent.mkdir(parents=True, exist_ok=True)
    std_path = out_csv.with_name(out_csv.stem + "_std.csv")
    records_path = out_csv.with_name(out_csv.stem + "_records.json")

    def write_table(path: Path, pick) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["method", *result.k_labels])
            for method in result.methods:
                row = [method]
                for k_label in result.k_labels:
                    value = pick(method, k_label)
                    row.append("NA" if value is None else repr(value))
                writer.writerow(row)

    write_table(out_csv, lambda m, k: result.mean_std(m, k)[0])
    write_table(std_path, lambda m, k: result.mean_std(m, k)[1])
    with open(records_path, "w") as fh:
        fh.write(result_to_json(result))
    written = {"mean": out_csv, "std": std_path, "records": records_path}
    if figures:
        from . import plots

        cindex_path = out_csv.with_name(out_csv.stem + "_cindex.png")
        hr_path = out_csv.with_name(out_csv.stem + "_hr.png")
        plots.plot_cindex_by_k(result, cindex_path)
        plots.plot_hazard_ratios(result, hr_path)
        written["cindex_figure"] = cindex_path
        written["hr_figure"] = hr_path
    return written
