"""Report figures rendered to files next to the CSV outputs.

Every function takes already-loaded rows, draws one PNG with a
non-interactive backend, and returns the written path. Nothing here is
interactive; rendering the same rows twice produces the same figure.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)
import numpy as np  # noqa: E402

VARIANT_COLORS = ("#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd",
                  "#8c564b", "#e377c2")


def plot_training_curves(records, path) -> Path:
    """Loss curves and validation effective rank over epochs.

    records: EpochRecord sequence from the training loop (or metrics.csv).
    """
    path = Path(path)
    epochs = [r.epoch for r in records]
    fig, (ax_loss, ax_rank) = plt.subplots(2, 1, figsize=(7, 6), sharex=True)
    ax_loss.plot(epochs, [r.train_loss for r in records], marker="o",
                 label="train")
    ax_loss.plot(epochs, [r.val_loss for r in records], marker="s",
                 label="validation")
    ax_loss.set_ylabel("loss")
    ax_loss.legend()
    ax_loss.grid(True, alpha=0.3)

    ax_rank.plot(epochs, [r.effective_rank for r in records], marker="o",
                 color=VARIANT_COLORS[2])
    ax_rank.set_ylabel("effective rank (validation)")
    ax_rank.set_xlabel("epoch")
    ax_rank.grid(True, alpha=0.3)

    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def plot_ablation_comparison(rows, metric: str, path) -> Path:
    """Per-variant bars of one ablation metric with per-seed points.

    rows: long-format dicts with keys suite, seed, variant, metric, value.
    Variants keep their first-appearance order; bars show the across-seed
    mean and the dots the individual seeds.
    """
    path = Path(path)
    picked = [r for r in rows if r["metric"] == metric]
    if not picked:
        raise ValueError(f"no rows with metric {metric!r}")
    variants: list[str] = []
    for r in picked:
        if r["variant"] not in variants:
            variants.append(r["variant"])
    values = {v: [float(r["value"]) for r in picked if r["variant"] == v]
              for v in variants}

    fig, ax = plt.subplots(figsize=(1.8 + 1.1 * len(variants), 4))
    xs = np.arange(len(variants))
    means = [float(np.mean(values[v])) for v in variants]
    ax.bar(xs, means, width=0.6,
           color=[VARIANT_COLORS[i % len(VARIANT_COLORS)] for i in xs],
           alpha=0.7)
    for i, v in enumerate(variants):
        seeds = values[v]
        ax.plot(np.full(len(seeds), i), seeds, "k.", markersize=9)
    ax.set_xticks(xs)
    ax.set_xticklabels(variants, rotation=20, ha="right")
    ax.set_ylabel(metric)
    ax.set_title(f"{picked[0]['suite']}: {metric}")
    ax.grid(True, axis="y", alpha=0.3)

    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def plot_dispersion_histogram(per_dim_by_name: dict, path) -> Path:
    """Overlaid histograms of per-dimension dispersion ratios.

    per_dim_by_name: label -> vector of within/across ratios, one value per
    embedding dimension. Non-finite entries are dropped before binning.
    """
    path = Path(path)
    fig, ax = plt.subplots(figsize=(7, 4))
    finite = {}
    for name, ratios in per_dim_by_name.items():
        arr = np.asarray(ratios, dtype=np.float64)
        finite[name] = arr[np.isfinite(arr)]
    all_values = np.concatenate([v for v in finite.values() if len(v)] or
                                [np.zeros(1)])
    top = float(all_values.max()) if len(all_values) else 1.0
    bins = np.linspace(0.0, max(top, 1e-6), 25)
    for i, (name, arr) in enumerate(finite.items()):
        ax.hist(arr, bins=bins, alpha=0.55, label=name,
                color=VARIANT_COLORS[i % len(VARIANT_COLORS)])
    ax.set_xlabel("within-participant / across-participant dispersion")
    ax.set_ylabel("dimensions")
    ax.legend()
    ax.grid(True, alpha=0.3)

    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def plot_probe_summary(report_rows, path) -> Path:
    """Bar chart of probe metrics from an evaluation report.

    report_rows: dicts with target, task, metric, value. AUC-like metrics
    and error metrics get separate panels since their scales differ.
    """
    path = Path(path)
    ranked = [r for r in report_rows if r["metric"] in ("auc", "pauc")]
    errors = [r for r in report_rows if r["metric"] == "mae"]
    n_panels = (1 if ranked else 0) + (1 if errors else 0)
    if n_panels == 0:
        raise ValueError("report has no probe rows to plot")
    fig, axes = plt.subplots(1, n_panels, figsize=(5.5 * n_panels, 4))
    axes = np.atleast_1d(axes)
    panel = 0
    if ranked:
        ax = axes[panel]
        labels = [f"{r['target']}\n{r['metric']}" for r in ranked]
        ax.bar(np.arange(len(ranked)), [float(r["value"]) for r in ranked],
               color=VARIANT_COLORS[0], alpha=0.7)
        ax.set_xticks(np.arange(len(ranked)))
        ax.set_xticklabels(labels)
        ax.set_ylim(0.0, 1.05)
        ax.axhline(0.5, color="k", linestyle=":", alpha=0.5)
        ax.set_ylabel("ranking quality")
        ax.grid(True, axis="y", alpha=0.3)
        panel += 1
    if errors:
        ax = axes[panel]
        labels = [r["target"] for r in errors]
        ax.bar(np.arange(len(errors)), [float(r["value"]) for r in errors],
               color=VARIANT_COLORS[3], alpha=0.7)
        ax.set_xticks(np.arange(len(errors)))
        ax.set_xticklabels(labels)
        ax.set_ylabel("mean absolute error")
        ax.grid(True, axis="y", alpha=0.3)

    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path
