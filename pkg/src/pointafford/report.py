"""Metrics report rendering: an aligned human-readable table, a tab-delimited
machine-readable document, and companion matplotlib figures.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .metrics import MetricsReport

REPORT_TXT = "report.txt"
REPORT_TSV = "report.tsv"
FIG_METRICS = "metrics_by_affordance.png"
FIG_PR = "pr_curves.png"


def _fmt(value: float | None, decimals: int) -> str:
    """Scaled-by-100 value rounded at the last reported digit."""
    if value is None:
        return "-"
    return f"{100.0 * value:.{decimals}f}"


def format_table(report: MetricsReport) -> str:
    """Aligned per-affordance table plus aggregates, values scaled by 100.

    MSE is the sum over classes of per-class mean squared errors; it is
    reported on the same x100 scale as the other metrics.
    """
    rows = [("affordance", "AP", "AUC", "aIoU", "MSE", "points", "positives")]
    for name, cm in report.per_class.items():
        rows.append(
            (name, _fmt(cm.ap, 1), _fmt(cm.auc, 1), _fmt(cm.aiou, 1), _fmt(cm.mse, 2),
             str(cm.n_points), str(cm.n_positive))
        )
    rows.append(
        ("MEAN/SUM", _fmt(report.mean_ap, 1), _fmt(report.mean_auc, 1),
         _fmt(report.mean_aiou, 1), _fmt(report.mse_sum, 2), "", "")
    )
    widths = [max(len(row[i]) for row in rows) for i in range(len(rows[0]))]
    lines = []
    for i, row in enumerate(rows):
        lines.append("  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip())
        if i == 0:
            lines.append("-" * (sum(widths) + 2 * (len(widths) - 1)))
    for key, value in sorted(report.metadata.items()):
        lines.append(f"# {key}: {value}")
    for metric, names in sorted(report.excluded.items()):
        lines.append(f"# {metric} undefined (excluded from mean): {', '.join(names)}")
    return "\n".join(lines) + "\n"


def format_tsv(report: MetricsReport) -> str:
    """Key<TAB>value document with full-precision scaled values."""
    lines = []
    for key, value in sorted(report.metadata.items()):
        lines.append(f"meta.{key}\t{value}")
    for key, value in report.scaled().items():
        lines.append(f"aggregate.{key}\t{'' if value is None else repr(value)}")
    for name, cm in report.per_class.items():
        for key, value in (("AP", cm.ap), ("AUC", cm.auc), ("aIoU", cm.aiou), ("MSE", cm.mse)):
            scaled = None if value is None else 100.0 * value
            lines.append(f"class.{name}.{key}\t{'' if scaled is None else repr(scaled)}")
        lines.append(f"class.{name}.points\t{cm.n_points}")
        lines.append(f"class.{name}.positives\t{cm.n_positive}")
    for metric, names in sorted(report.excluded.items()):
        lines.append(f"excluded.{metric}\t{','.join(names)}")
    return "\n".join(lines) + "\n"


def render_metric_bars(report: MetricsReport, path: str | Path) -> Path:
    names = list(report.per_class)
    x = np.arange(len(names))
    width = 0.25
    fig, ax = plt.subplots(figsize=(max(6, 1.2 * len(names)), 4))
    for offset, (label, getter) in enumerate(
        (("AP", lambda c: c.ap), ("AUC", lambda c: c.auc), ("aIoU", lambda c: c.aiou))
    ):
        values = [
            100.0 * getter(report.per_class[n]) if getter(report.per_class[n]) is not None else 0.0
            for n in names
        ]
        ax.bar(x + (offset - 1) * width, values, width, label=label)
    ax.set_xticks(x)
    ax.set_xticklabels(names, rotation=45, ha="right")
    ax.set_ylabel("metric x 100")
    ax.set_ylim(0, 100)
    ax.legend()
    ax.set_title("per-affordance metrics")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return Path(path)


def render_pr_curves(report: MetricsReport, path: str | Path) -> Path:
    fig, ax = plt.subplots(figsize=(6, 5))
    for name, (recall, precision) in report.curves.items():
        ax.plot(np.concatenate(([0.0], recall)), np.concatenate(([1.0], precision)), label=name)
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.05)
    ax.legend(fontsize=8)
    ax.set_title("precision-recall by affordance")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return Path(path)


def write_report(report: MetricsReport, out_dir: str | Path) -> dict[str, Path]:
    """Write the table, the delimited document and the figures into out_dir."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {
        "table": out_dir / REPORT_TXT,
        "tsv": out_dir / REPORT_TSV,
        "bars": out_dir / FIG_METRICS,
    }
    paths["table"].write_text(format_table(report), encoding="utf-8")
    paths["tsv"].write_text(format_tsv(report), encoding="utf-8")
    render_metric_bars(report, paths["bars"])
    if report.curves:
        paths["pr"] = render_pr_curves(report, out_dir / FIG_PR)
    return paths
