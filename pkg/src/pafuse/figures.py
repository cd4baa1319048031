"""Matplotlib renderings written next to the machine-readable outputs."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

_METRIC_KEYS = ("wb", "pb", "body", "face", "hands")


def save_gap_figure(histograms: dict[str, dict[int, int]], path) -> None:
    """Bar chart of gap distributions, one panel per histogram."""
    n = len(histograms)
    fig, axes = plt.subplots(1, n, figsize=(4.2 * n, 3.2), squeeze=False)
    for ax, (title, hist) in zip(axes[0], histograms.items()):
        if hist:
            gaps = sorted(hist)
            ax.bar([str(g) for g in gaps], [hist[g] for g in gaps], color="#4878cf")
        ax.set_title(title)
        ax.set_xlabel("gap between annotated frames")
        ax.set_ylabel("count")
        if len(hist) > 12:
            ax.tick_params(axis="x", labelrotation=90, labelsize=6)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_loss_figure(log: list[dict], path) -> None:
    fig, ax = plt.subplots(figsize=(5.0, 3.2))
    ax.plot([e["epoch"] for e in log], [e["loss"] for e in log], marker="o", ms=3)
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean training loss")
    ax.set_yscale("log")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_report_figure(report, path) -> None:
    """Grouped bars: WB/PB/Body/Face/Hands under P-Best and P-Agg."""
    fig, ax = plt.subplots(figsize=(5.6, 3.4))
    xs = range(len(_METRIC_KEYS))
    width = 0.38
    best = [getattr(report.p_best, k) for k in _METRIC_KEYS]
    agg = [getattr(report.p_agg, k) for k in _METRIC_KEYS]
    ax.bar([x - width / 2 for x in xs], best, width, label="P-Best", color="#4878cf")
    ax.bar([x + width / 2 for x in xs], agg, width, label="P-Agg", color="#ee854a")
    ax.set_xticks(list(xs), [k.upper() for k in _METRIC_KEYS])
    ax.set_ylabel("MPJPE (mm)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_ablation_figure(results: list, path, baseline_wb: float | None = None) -> None:
    """P-Best metric comparison across ablation variants."""
    fig, ax = plt.subplots(figsize=(6.4, 3.6))
    width = 0.8 / len(results)
    for i, res in enumerate(results):
        vals = [getattr(res.report.p_best, k) for k in _METRIC_KEYS]
        offs = [x + (i - (len(results) - 1) / 2) * width for x in range(len(_METRIC_KEYS))]
        ax.bar(offs, vals, width, label=res.variant)
    if baseline_wb is not None:
        ax.axhline(baseline_wb, color="gray", ls="--", lw=1, label="mean-pose WB")
    ax.set_xticks(range(len(_METRIC_KEYS)), [k.upper() for k in _METRIC_KEYS])
    ax.set_ylabel("P-Best MPJPE (mm)")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
