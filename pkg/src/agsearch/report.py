"""Evaluation report rendering: delimited PR points plus figure files."""
from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from .synthlab import EvalReport


def write_pr_csv(report: EvalReport, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["precision", "recall"])
        for precision, recall in report.pr_points:
            writer.writerow([f"{precision:.6f}", f"{recall:.6f}"])


def render_pr_curve(report: EvalReport, path) -> None:
    fig, ax = plt.subplots(figsize=(5.0, 4.0))
    if report.pr_points:
        recalls = [r for _, r in report.pr_points]
        precisions = [p for p, _ in report.pr_points]
        ax.plot(recalls, precisions, marker="o", markersize=3, linewidth=1.2)
    ax.set_xlabel("Recall")
    ax.set_ylabel("Precision")
    ax.set_xlim(0.0, 1.02)
    ax.set_ylim(0.0, 1.02)
    ax.grid(alpha=0.3)
    ax.set_title(f"PR curve (AUC = {report.auc:.3f})")
    fig.savefig(path, bbox_inches="tight", dpi=120)
    plt.close(fig)


def render_precision_at_k(report: EvalReport, path) -> None:
    fig, ax = plt.subplots(figsize=(5.0, 3.2))
    ks = sorted(report.precision_at_k)
    values = [report.precision_at_k[k] for k in ks]
    xs = range(len(ks))
    bars = [v if v is not None else 0.0 for v in values]
    ax.bar(xs, bars, color=["#4878a8" if v is not None else "#cccccc" for v in values])
    for x, v in zip(xs, values):
        label = f"{v:.2f}" if v is not None else "-"
        ax.text(x, (v or 0.0) + 0.02, label, ha="center", fontsize=9)
    ax.set_xticks(list(xs), [f"P@{k}" for k in ks])
    ax.set_ylim(0.0, 1.12)
    ax.set_ylabel("Precision")
    fig.savefig(path, bbox_inches="tight", dpi=120)
    plt.close(fig)


def write_report_bundle(report: EvalReport, out_dir) -> dict:
    """JSON-able summary plus CSV and figure files under out_dir."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_pr_csv(report, out / "pr_points.csv")
    render_pr_curve(report, out / "pr_curve.png")
    render_precision_at_k(report, out / "precision_at_k.png")
    return {
        "pr_points_csv": str(out / "pr_points.csv"),
        "pr_curve_png": str(out / "pr_curve.png"),
        "precision_at_k_png": str(out / "precision_at_k.png"),
    }
