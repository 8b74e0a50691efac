"""Figure rendering for evaluation reports.

Consumes the plot-ready arrays already present in report JSON (histograms,
ROC vertices, confusion counts) and writes PNG files. Only the report
command imports this module, so the metric pipeline never touches a plotting
backend.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .errors import ValidationError

SUBGROUP_STYLE = {
    "COVID": {"color": "#c0392b"},
    "NORMAL": {"color": "#2980b9"},
    "OTHER_DISEASE": {"color": "#7f8c8d"},
}


def render_histograms(report: dict, path: str | Path) -> None:
    """One overlaid step histogram of predicted scores per subgroup."""
    hists = report["histograms"]
    bins = report["bins"]
    edges = np.linspace(0.0, 1.0, bins + 1)
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for name, counts in sorted(hists.items()):
        if len(counts) != bins:
            raise ValidationError(f"histogram {name!r} has {len(counts)} bins, expected {bins}")
        style = SUBGROUP_STYLE.get(name, {})
        ax.stairs(counts, edges, label=f"{name} (n={sum(counts)})", fill=False, **style)
    ax.set_xlabel("predicted positive-class score")
    ax.set_ylabel("image count")
    ax.set_yscale("symlog")
    ax.legend()
    ax.set_title("Score distribution by subgroup")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_roc(report: dict, path: str | Path, label: str = "") -> None:
    roc = np.array(report["roc"], dtype=float)
    fig, ax = plt.subplots(figsize=(5.5, 5.5))
    name = label or "model"
    ax.plot(roc[:, 0], roc[:, 1], label=f"{name} (AUC={report['auc']:.4f})")
    ax.plot([0, 1], [0, 1], linestyle=":", color="#aaaaaa", linewidth=1)
    ax.set_xlabel("false positive rate")
    ax.set_ylabel("true positive rate")
    ax.set_xlim(-0.02, 1.02)
    ax.set_ylim(-0.02, 1.02)
    ax.legend(loc="lower right")
    ax.set_title("ROC")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_confusion(report: dict, path: str | Path) -> None:
    cm = np.array(report["confusion"], dtype=int)
    if cm.shape != (2, 2):
        raise ValidationError(f"confusion matrix must be 2x2, got {cm.shape}")
    fig, ax = plt.subplots(figsize=(4.5, 4.5))
    ax.imshow(cm, cmap="Blues")
    labels = ["NON_COVID", "COVID"]
    for i in range(2):
        for j in range(2):
            ax.text(
                j,
                i,
                str(cm[i, j]),
                ha="center",
                va="center",
                color="black",
                fontsize=14,
            )
    ax.set_xticks([0, 1], [f"pred {l}" for l in labels])
    ax.set_yticks([0, 1], [f"true {l}" for l in labels])
    ax.set_title(f"Confusion at threshold {report['threshold']:.6f}")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_roc_overlay(reports: dict[str, dict], path: str | Path) -> None:
    """All models' ROC curves on one axis for side-by-side comparison."""
    fig, ax = plt.subplots(figsize=(5.5, 5.5))
    for name in sorted(reports):
        roc = np.array(reports[name]["roc"], dtype=float)
        ax.plot(roc[:, 0], roc[:, 1], label=f"{name} (AUC={reports[name]['auc']:.4f})")
    ax.plot([0, 1], [0, 1], linestyle=":", color="#aaaaaa", linewidth=1)
    ax.set_xlabel("false positive rate")
    ax.set_ylabel("true positive rate")
    ax.set_xlim(-0.02, 1.02)
    ax.set_ylim(-0.02, 1.02)
    ax.legend(loc="lower right")
    ax.set_title("ROC comparison")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
