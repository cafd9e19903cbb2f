"""Command-line entry point.

Exit codes: 0 success, 1 rejected input (bad files, bad config), 2
numerical failure (non-convergence, failed gradient check, undefined
metric).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import harness, volume
from .aggregation import FeatureBag
from .errors import InputError, NumericalError
from .harness import NATIVE
from .metrics import RiskGroup, c_index, hazard_ratio
from .numerics import Rng, derive_seed
from .optim import TrainConfig, gradcheck, train, write_curve_csv
from .survival import (
    METHOD_KINDS,
    ModelDims,
    cohort_risks,
    init_method,
    load_checkpoint,
    save_checkpoint,
)


def _add_dim_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--query-dim", type=int, default=64, help="anchor-attention query width")
    p.add_argument("--value-dim", type=int, default=64, help="anchor-attention value width")
    p.add_argument("--gate-dim", type=int, default=64, help="gated-attention width")
    p.add_argument("--hidden-dim", type=int, default=32, help="MLP head hidden width")


def _dims(args, n_features: int) -> ModelDims:
    return ModelDims(
        n_features=n_features,
        query_dim=args.query_dim,
        value_dim=args.value_dim,
        gate_dim=args.gate_dim,
        hidden_dim=args.hidden_dim,
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="anchorsurv",
        description="Anchor-attention survival prediction pipeline",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("select-slices", help="export anchor-window tiles from a labeled volume")
    p.add_argument("--intensities", required=True, help="f32 MVOL volume")
    p.add_argument("--mask", required=True, help="u8 MVOL tumor mask")
    p.add_argument("--patient", default=None, help="patient id (default: intensities stem)")
    for name in ("kx1", "kx2", "ky1", "ky2", "kz1", "kz2"):
        p.add_argument(f"--{name}", type=int, default=0, help=f"window {name[1]} {name[2:]}")
    p.add_argument("--tile-size", type=int, default=224)
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("synth", help="generate a planted-signal synthetic cohort")
    p.add_argument("--patients", type=int, required=True)
    p.add_argument("--slices", type=int, required=True)
    p.add_argument("--dim", type=int, required=True, help="feature dimension")
    p.add_argument("--censor", type=float, default=0.3, help="target censored fraction")
    p.add_argument("--signal-dim", type=int, default=0)
    p.add_argument("--anchor-boost", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("train", help="train one method on a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--method", required=True, choices=METHOD_KINDS)
    p.add_argument("--epochs", type=int, default=300)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--val-fraction", type=float, default=0.0, help="carve a validation split")
    p.add_argument("--val-manifest", default=None, help="explicit validation manifest")
    p.add_argument(
        "--multi-train",
        choices=("max", "mean"),
        default="max",
        help="daal-multiple training risk: through the max (default) or the plane mean",
    )
    _add_dim_flags(p)
    p.add_argument("--out", required=True, help="checkpoint directory")

    p = sub.add_parser("eval", help="evaluate a checkpoint on a manifest")
    p.add_argument("--model", required=True, help="checkpoint directory")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="metrics JSON path")

    p = sub.add_parser("cv", help="cross-validated sweep over methods and slice budgets")
    p.add_argument("--manifest", required=True)
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--test-fraction", type=float, default=0.15)
    p.add_argument("--methods", default="all", help="'all' or comma-separated method kinds")
    p.add_argument(
        "--k-values",
        default=NATIVE,
        help=f"comma-separated slice budgets, or '{NATIVE}' for the bags as stored",
    )
    p.add_argument("--epochs", type=int, default=300)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--multi-train", choices=("max", "mean"), default="max")
    _add_dim_flags(p)
    p.add_argument("--out", required=True, help="results directory")

    p = sub.add_parser("gradcheck", help="finite-difference check of every method's gradients")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tolerance", type=float, default=1e-4)

    p = sub.add_parser("report", help="render a results directory into tables and figures")
    p.add_argument("--results", required=True, help="directory written by cv")
    p.add_argument("--out", required=True, help="mean C-index CSV path")
    p.add_argument("--no-figures", action="store_true", help="skip figure rendering")

    return parser


def _cmd_select_slices(args) -> int:
    vol = volume.load_labeled_volume(args.intensities, args.mask)
    window = volume.WindowConfig(
        k_x1=args.kx1, k_x2=args.kx2, k_y1=args.ky1, k_y2=args.ky2, k_z1=args.kz1, k_z2=args.kz2
    )
    patient = args.patient or Path(args.intensities).stem
    sidecar = volume.export_tiles(vol, patient, window, args.out, tile_size=args.tile_size)
    n_tiles = sum(1 for s in sidecar["slices"] if s["tile"])
    print(f"patient {patient}: {n_tiles} tiles, coverage ratio {sidecar['coverage_ratio']:.4f}")
    return 0


def _cmd_synth(args) -> int:
    cfg = harness.SynthConfig(
        n_patients=args.patients,
        n_slices=args.slices,
        n_features=args.dim,
        signal_dim=args.signal_dim,
        censor_target=args.censor,
        anchor_boost=args.anchor_boost,
        seed=args.seed,
    )
    manifest = harness.synth_generate(cfg, args.out)
    rows = harness.load_manifest(manifest)
    censored = sum(1 for r in rows if not r.event)
    print(f"wrote {len(rows)} patients ({censored} censored) to {manifest}")
    return 0


def _split_validation(rows, fraction: float, seed: int):
    if fraction <= 0.0:
        return rows, []
    ids = [r.patient_id for r in rows]
    rng = Rng(derive_seed(seed, "val-split"))
    rng.shuffle(ids)
    n_val = max(1, int(len(ids) * fraction + 0.5))
    val_ids = set(ids[:n_val])
    return [r for r in rows if r.patient_id not in val_ids], [r for r in rows if r.patient_id in val_ids]


def _cmd_train(args) -> int:
    rows = harness.load_manifest(args.manifest)
    if args.val_manifest:
        val_rows = harness.load_manifest(args.val_manifest)
        train_rows = rows
    else:
        train_rows, val_rows = _split_validation(rows, args.val_fraction, args.seed)
    bags, labels = harness.load_bags(train_rows)
    val_bags, val_labels = harness.load_bags(val_rows) if val_rows else ([], [])
    dims = _dims(args, bags[0].n_features)
    method = init_method(args.method, dims, Rng(args.seed), train_through_max=args.multi_train == "max")
    cfg = TrainConfig(epochs=args.epochs, lr=args.lr, seed=args.seed)
    result = train(method, bags, labels, cfg, val_bags=val_bags or None, val_labels=val_labels or None)
    train_risks, _ = cohort_risks(result.method, bags)
    out = Path(args.out)
    save_checkpoint(
        out,
        result.method,
        dims,
        meta={
            "seed": args.seed,
            "epochs": args.epochs,
            "lr": args.lr,
            "train_median_risk": float(np.median(train_risks)),
            "best_epoch": result.best_epoch,
            "best_val_cindex": result.best_val,
        },
    )
    write_curve_csv(out / "curve.csv", result.curve)
    final_loss = result.curve[-1].train_loss
    selected = f"epoch {result.best_epoch}" if result.best_epoch else "final epoch"
    print(f"trained {args.method}: final loss {final_loss:.6f}, selected {selected}, saved to {out}")
    return 0


def _cmd_eval(args) -> int:
    method, manifest = load_checkpoint(args.model)
    rows = harness.load_manifest(args.manifest)
    bags, labels = harness.load_bags(rows)
    risks, _ = cohort_risks(method, bags)
    ci = c_index(risks, labels)
    payload = {
        "method": method.kind,
        "fold": None,
        "n_test": len(rows),
        "c_index": float(ci),
    }
    threshold = manifest.get("train_median_risk")
    if threshold is not None:
        group = RiskGroup(
            assignment=tuple("high" if r > threshold else "low" for r in risks),
            threshold=float(threshold),
        )
        fit = hazard_ratio(group, labels)
        payload.update(
            {
                "threshold": float(threshold),
                "hr": fit.hr if fit.converged else None,
                "beta": fit.beta if fit.converged else None,
                "hr_converged": fit.converged,
                "hr_diagnostic": fit.diagnostic,
            }
        )
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
    print(f"c-index {payload['c_index']:.4f} on {len(rows)} patients -> {out}")
    return 0


def _cmd_cv(args) -> int:
    rows = harness.load_manifest(args.manifest)
    methods = list(METHOD_KINDS) if args.methods == "all" else args.methods.split(",")
    k_values = []
    for token in args.k_values.split(","):
        token = token.strip()
        if token == NATIVE:
            k_values.append(NATIVE)
        else:
            try:
                k_values.append(int(token))
            except ValueError:
                raise InputError(f"bad slice budget {token!r}; expected an integer or '{NATIVE}'")
    split = harness.stratified_split(rows, args.test_fraction, args.folds, args.seed)
    cfg = TrainConfig(epochs=args.epochs, lr=args.lr, seed=args.seed)
    n_features_probe = harness.load_bags(rows[:1])[0][0].n_features
    result = harness.run_cv(
        rows,
        split,
        methods,
        k_values,
        cfg,
        dims=_dims(args, n_features_probe),
        train_through_max=args.multi_train == "max",
        workers=args.workers,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    records_path = out / "records.json"
    with open(records_path, "w") as fh:
        fh.write(harness.result_to_json(result))
    print(f"wrote {records_path}")
    for method in result.methods:
        for k_label in result.k_labels:
            mean, std = result.mean_std(method, k_label)
            cell = "NA" if mean is None else f"{mean:.4f} +/- {std:.4f}"
            print(f"  {method:<14} K={k_label:<7} test c-index {cell}")
    return 0


def _cmd_gradcheck(args) -> int:
    from .survival import SurvivalLabel

    failures = []
    for kind in METHOD_KINDS:
        seed = derive_seed(args.seed, "gradcheck", kind)
        rng = Rng(seed)
        k, f = 5, 6
        dims = ModelDims(n_features=f, query_dim=3, value_dim=4, gate_dim=3, hidden_dim=4)
        method = init_method(kind, dims, rng)
        bags = []
        labels = []
        for _ in range(6):
            feats = [[rng.normal() for _ in range(f)] for _ in range(k)]
            bags.append(FeatureBag(features=feats, anchor_pos=(0, 2, 4)))
            labels.append(SurvivalLabel(time=rng.exponential(1.0), event=rng.uniform() < 0.7))
        if not any(lab.event for lab in labels):
            labels[0] = SurvivalLabel(time=labels[0].time, event=True)
        report = gradcheck(method, bags, labels, tolerance=args.tolerance)
        status = "ok" if report.passed else "FAIL"
        print(f"{kind:<14} max rel err {report.max_rel_err:.3e}  {status}")
        if not report.passed:
            failures.append(kind)
    if failures:
        raise NumericalError(f"gradient check failed for: {', '.join(failures)}")
    return 0


def _cmd_report(args) -> int:
    records_path = Path(args.results) / "records.json"
    if not records_path.is_file():
        raise InputError(f"no records.json under {args.results}")
    result = harness.result_from_json(records_path.read_text())
    written = harness.report(result, args.out, figures=not args.no_figures)
    for label, path in written.items():
        print(f"{label}: {path}")
    return 0


_COMMANDS = {
    "select-slices": _cmd_select_slices,
    "synth": _cmd_synth,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "cv": _cmd_cv,
    "gradcheck": _cmd_gradcheck,
    "report": _cmd_report,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
