"""Figure rendering for CV sweep results (headless matplotlib)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be fixed first)


def _k_axis(result) -> tuple[list[float], list[str]]:
    # numeric budgets plot at their value, 'native' gets its own slot at the end
    xs, ticks = [], []
    numeric = [k for k in result.k_labels if k.isdigit()]
    for k in result.k_labels:
        if k.isdigit():
            xs.append(float(k))
        else:
            tail = max((float(v) for v in numeric), default=0.0)
            xs.append(tail + (max(float(v) for v in numeric) * 0.15 if numeric else 1.0))
        ticks.append(k)
    return xs, ticks


def plot_cindex_by_k(result, out_path: str | Path) -> Path:
    """Mean test concordance vs slice budget, one line per method, std error bars."""
    out_path = Path(out_path)
    xs, ticks = _k_axis(result)
    fig, ax = plt.subplots(figsize=(7.0, 4.5))
    for method in result.methods:
        means, stds = [], []
        for k in result.k_labels:
            mean, std = result.mean_std(method, k)
            means.append(float("nan") if mean is None else mean)
            stds.append(0.0 if std is None else std)
        ax.errorbar(xs, means, yerr=stds, marker="o", markersize=4, capsize=3, label=method)
    ax.axhline(0.5, color="grey", linewidth=0.8, linestyle="--")
    ax.set_xlabel("slices per patient")
    ax.set_ylabel("test C-index (mean over folds)")
    ax.set_xticks(xs, ticks)
    ax.grid(alpha=0.3)
    ax.legend(fontsize=8, ncol=2)
    fig.tight_layout()
    fig.savefig(out_path, dpi=150)
    plt.close(fig)
    return out_path


def plot_hazard_ratios(result, out_path: str | Path) -> Path:
    """Voted-group hazard ratio per method, one panel row per slice budget."""
    out_path = Path(out_path)
    n_k = len(result.k_labels)
    fig, axes = plt.subplots(n_k, 1, figsize=(7.0, 2.2 * n_k), squeeze=False)
    for row, k_label in enumerate(result.k_labels):
        ax = axes[row][0]
        values = []
        for method in result.methods:
            hr = next(
                (v.hr for v in result.voted if v.method == method and v.k_label == k_label),
                None,
            )
            values.append(float("nan") if hr is None else hr)
        ax.bar(range(len(result.methods)), values, color="#4878a8")
        ax.axhline(1.0, color="grey", linewidth=0.8, linestyle="--")
        ax.set_xticks(range(len(result.methods)), result.methods, rotation=20, fontsize=7)
        ax.set_ylabel("hazard ratio")
        ax.set_title(f"slice budget {k_label}", fontsize=9)
        ax.grid(alpha=0.3, axis="y")
    fig.tight_layout()
    fig.savefig(out_path, dpi=150)
    plt.close(fig)
    return out_path
