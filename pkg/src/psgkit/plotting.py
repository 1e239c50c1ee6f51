"""Figures written to files (Agg backend, no display needed)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .metrics import MetricsReport  # noqa: E402


def plot_loss(records: list[dict], path) -> Path:
    path = Path(path)
    fig, ax = plt.subplots(figsize=(5, 3.2))
    for phase, colour in ((1, "tab:blue"), (2, "tab:orange")):
        pts = [(r["epoch"], r["mean_loss"]) for r in records if r["phase"] == phase]
        if pts:
            ax.plot(*zip(*pts), marker="o", color=colour, label=f"phase {phase}")
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean loss")
    ax.set_yscale("log")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def plot_recall(report: MetricsReport, path) -> Path:
    path = Path(path)
    fig, (a1, a2) = plt.subplots(1, 2, figsize=(9, 3.2))
    xs = range(len(report.Ks))
    w = 0.4
    a1.bar([x - w / 2 for x in xs], [report.recall[k] for k in report.Ks], w, label="R@K")
    a1.bar([x + w / 2 for x in xs], [report.mean_recall[k] for k in report.Ks], w, label="mR@K")
    a1.set_xticks(list(xs), [str(k) for k in report.Ks])
    a1.set_xlabel("K")
    a1.set_ylim(0, 1.05)
    a1.legend()
    preds = sorted(report.per_predicate)
    a2.bar([str(p) for p in preds], [report.per_predicate[p]["recall"] for p in preds], color="tab:green")
    a2.set_xlabel("predicate")
    a2.set_ylabel(f"recall@{report.Ks[-1]}")
    a2.set_ylim(0, 1.05)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path
