"""Report rendering: delimited output plus matplotlib figures.

Every CLI report path writes machine-readable CSV and, next to it, a PNG
figure of the same data (CMC curve for evaluation, loss curve for
training).  Rendering is headless (Agg backend).
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .evaluate import EvalReport


def write_cmc_csv(path, report: EvalReport) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("rank,cmc\n")
        for r, v in enumerate(report.cmc, start=1):
            fh.write(f"{r},{v:.6f}\n")


def plot_cmc(path, report: EvalReport) -> None:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ranks = np.arange(1, len(report.cmc) + 1)
    ax.step(ranks, report.cmc, where="post")
    ax.set_xlabel("rank")
    ax.set_ylabel("matching rate")
    ax.set_ylim(0, 1.02)
    ax.set_title(f"CMC ({report.protocol}, mAP {report.map:.3f})")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def format_report(report: EvalReport) -> str:
    lines = [
        f"protocol          {report.protocol}",
        f"queries used      {report.n_queries_used}",
        f"queries skipped   {report.n_skipped}",
        f"mAP               {report.map:.4f}",
    ]
    for r in (1, 5, 10, 20):
        if r <= len(report.cmc):
            lines.append(f"rank-{r:<12d} {report.cmc[r - 1]:.4f}")
    return "\n".join(lines)


def write_trace_csv(path, traces: dict) -> None:
    """traces: {branch: [(step, lr, loss), ...]}."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("branch,step,lr,loss\n")
        for branch, rows in traces.items():
            for step, lr, loss in rows:
                fh.write(f"{branch},{step},{lr:.6g},{loss:.17g}\n")


def plot_trace(path, traces: dict) -> None:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for branch, rows in traces.items():
        steps = [r[0] for r in rows]
        losses = [r[2] for r in rows]
        ax.plot(steps, losses, label=branch, linewidth=1.0)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend(title="branch", fontsize=8)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
