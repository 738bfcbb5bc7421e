"""Summary tables and figures (ROC polylines, metric bars) from cross-validation CSVs."""

from __future__ import annotations

import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .crossval import ReportTable, to_csv, SUMMARY_COLUMNS  # noqa: E402
from .labels import TARGETS  # noqa: E402
from .metrics import METRICS, roc_curve  # noqa: E402

# byte-stable SVG output
STYLE = {
    "svg.hashsalt": "mprkit",
    "svg.fonttype": "none",
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "figure.dpi": 100,
}
SAVE_META = {"svg": {"Date": None, "Creator": None}, "png": {"Software": None}}

ROW_LABEL = {1: "2.5D*", 0: "2.5D+"}


def summary_table(report: ReportTable) -> str:
    """Plain-text results table, one block per target and one row per TTA mode."""
    summ = report.summary()
    lines = []
    for target in TARGETS:
        rows = [r for r in summ if r["target"] == target]
        if not rows:
            continue
        lines.append(f"target: {target}")
        lines.append("model   " + "".join(f"{m:>16}" for m in METRICS))
        for tta in sorted({r["tta"] for r in rows}, reverse=True):
            cells = []
            for m in METRICS:
                r = next(x for x in rows if x["tta"] == tta and x["metric"] == m)
                cells.append("n/a" if math.isnan(r["mean"]) else f"{r['mean']:.2f} +- {r['std']:.2f}")
            lines.append(f"{ROW_LABEL[tta]:<8}" + "".join(f"{c:>16}" for c in cells))
        lines.append("")
    return "\n".join(lines)


def _pooled(report: ReportTable, target: str, tta: int):
    sel = [p for p in report.predictions if p["target"] == target and p["tta"] == tta]
    return np.array([p["label"] for p in sel], dtype=bool), np.array([p["score"] for p in sel])


def plot_roc(report: ReportTable, target: str, path) -> Path:
    """Pooled lesion-level ROC over all splits; one polyline per TTA mode."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(3.6, 3.6))
        ax.plot([0, 1], [0, 1], color="0.7", lw=0.8, ls="--")
        for tta in (1, 0):
            y, s = _pooled(report, target, tta)
            if y.size == 0 or y.all() or not y.any():
                continue
            fpr, tpr = roc_curve(y, s)
            auc = report.mean(target, "auc", bool(tta))
            ax.plot(fpr, tpr, lw=1.2, label=f"{ROW_LABEL[tta]} (mean AUC {auc:.2f})")
        ax.set_xlim(0, 1)
        ax.set_ylim(0, 1.01)
        ax.set_xlabel("1 - specificity")
        ax.set_ylabel("sensitivity")
        ax.set_title(target)
        ax.legend(loc="lower right", frameon=False)
        fig.tight_layout()
        path = Path(path)
        fig.savefig(path, format=path.suffix[1:], metadata=SAVE_META.get(path.suffix[1:]))
        plt.close(fig)
    return path


def plot_metrics(report: ReportTable, path) -> Path:
    """Grouped bars of mean +- std per metric, one group per (target, TTA mode)."""
    summ = report.summary()
    groups = sorted({(r["target"], r["tta"]) for r in summ}, key=lambda g: (TARGETS.index(g[0]), -g[1]))
    x = np.arange(len(METRICS))
    width = 0.8 / max(len(groups), 1)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(6.4, 3.0))
        for gi, (target, tta) in enumerate(groups):
            rows = {r["metric"]: r for r in summ if r["target"] == target and r["tta"] == tta}
            means = [rows[m]["mean"] for m in METRICS]
            stds = [rows[m]["std"] for m in METRICS]
            ax.bar(x + (gi - (len(groups) - 1) / 2) * width, means, width, yerr=stds, capsize=2,
                   label=f"{target} {ROW_LABEL[tta]}")
        ax.set_xticks(x, METRICS)
        ax.set_ylim(0, 1.05)
        ax.legend(frameon=False, fontsize=7, ncol=2)
        fig.tight_layout()
        path = Path(path)
        fig.savefig(path, format=path.suffix[1:], metadata=SAVE_META.get(path.suffix[1:]))
        plt.close(fig)
    return path


def render_report(report: ReportTable, out_dir) -> dict[str, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {"summary": out_dir / "summary.csv", "table": out_dir / "table.txt"}
    paths["summary"].write_text(to_csv(report.summary(), SUMMARY_COLUMNS))
    paths["table"].write_text(summary_table(report))
    for target in TARGETS:
        if any(p["target"] == target for p in report.predictions):
            paths[f"roc_{target}"] = plot_roc(report, target, out_dir / f"roc_{target}.svg")
    paths["metrics"] = plot_metrics(report, out_dir / "metrics.svg")
    return paths
