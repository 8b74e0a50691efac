"""Evaluation suite over predicted probability scores.

Operating points at cut-off thresholds (prediction rule: score strictly
greater than threshold means positive), threshold sweeps, Wald confidence
intervals, ROC/AUC with half-credit tie handling, confusion matrices, and
per-subgroup score histograms. Everything here is a pure function over an
immutable ScoreSet; report JSON is plot-ready and carries no rendering.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InputError, ValidationError
from .manifest import Label, Subgroup

DEFAULT_Z = 1.96
DEFAULT_BINS = 50
DEFAULT_TARGET_SENSITIVITY = 0.975
THRESHOLD_GRID_STEP = 1e-6


@dataclass(frozen=True)
class ScoreEntry:
    score: float
    label: Label
    subgroup: Subgroup
    image_path: str


@dataclass(frozen=True)
class ScoreSet:
    entries: tuple[ScoreEntry, ...]

    def __post_init__(self):
        for e in self.entries:
            if not math.isfinite(e.score):
                raise ValidationError(f"non-finite score for {e.image_path}")

    @property
    def positives(self) -> np.ndarray:
        return np.array([e.score for e in self.entries if e.label is Label.COVID], dtype=np.float64)

    @property
    def negatives(self) -> np.ndarray:
        return np.array([e.score for e in self.entries if e.label is not Label.COVID], dtype=np.float64)

    def scores_for(self, subgroup: Subgroup) -> np.ndarray:
        return np.array([e.score for e in self.entries if e.subgroup is subgroup], dtype=np.float64)


def _require_both_labels(scores: ScoreSet) -> tuple[np.ndarray, np.ndarray]:
    pos, neg = scores.positives, scores.negatives
    if len(pos) == 0 or len(neg) == 0:
        raise ValidationError(
            f"score set needs both labels: {len(pos)} COVID, {len(neg)} NON_COVID entries"
        )
    return pos, neg


@dataclass(frozen=True)
class OperatingPoint:
    threshold: float
    sensitivity: float
    specificity: float
    tp: int
    fn: int
    tn: int
    fp: int


@dataclass(frozen=True)
class ConfidenceInterval:
    accuracy: float
    n: int
    z: float
    r: float


def operating_point(scores: ScoreSet, threshold: float) -> OperatingPoint:
    """Counts and rates under the strict rule: predicted COVID iff score > threshold."""
    pos, neg = _require_both_labels(scores)
    tp = int(np.count_nonzero(pos > threshold))
    fp = int(np.count_nonzero(neg > threshold))
    fn = len(pos) - tp
    tn = len(neg) - fp
    return OperatingPoint(
        threshold=float(threshold),
        sensitivity=tp / (tp + fn),
        specificity=tn / (tn + fp),
        tp=tp,
        fn=fn,
        tn=tn,
        fp=fp,
    )


def threshold_sweep(scores: ScoreSet, thresholds: list[float] | np.ndarray) -> list[OperatingPoint]:
    """One operating point per threshold; thresholds must be sorted ascending.

    Counts come from searchsorted on the sorted score arrays, which agrees
    with operating_point exactly: elements > t is n minus elements <= t.
    """
    thresholds = np.asarray(list(thresholds), dtype=np.float64)
    if thresholds.size and np.any(np.diff(thresholds) < 0):
        raise ValidationError("thresholds must be sorted ascending")
    pos, neg = _require_both_labels(scores)
    pos_sorted = np.sort(pos)
    neg_sorted = np.sort(neg)
    n_pos, n_neg = len(pos_sorted), len(neg_sorted)
    tps = n_pos - np.searchsorted(pos_sorted, thresholds, side="right")
    fps = n_neg - np.searchsorted(neg_sorted, thresholds, side="right")
    out = []
    for t, tp, fp in zip(thresholds, tps, fps):
        tp, fp = int(tp), int(fp)
        out.append(
            OperatingPoint(
                threshold=float(t),
                sensitivity=tp / n_pos,
                specificity=(n_neg - fp) / n_neg,
                tp=tp,
                fn=n_pos - tp,
                tn=n_neg - fp,
                fp=fp,
            )
        )
    return out


def default_sweep_grid(scores: ScoreSet, grid_points: int = 1000) -> np.ndarray:
    """All distinct observed scores plus a uniform grid over [0, 1]."""
    observed = np.array([e.score for e in scores.entries], dtype=np.float64)
    grid = np.linspace(0.0, 1.0, grid_points)
    return np.unique(np.concatenate([observed, grid]))


def threshold_for_sensitivity(
    scores: ScoreSet, target: float, grid_step: float = THRESHOLD_GRID_STEP
) -> float:
    """Largest grid threshold achieving sensitivity >= target.

    Largest means maximal specificity at that sensitivity. With the strict
    prediction rule the achieving set is the open interval below the m-th
    largest COVID score (m = ceil(target * #COVID)), so the returned value is
    the largest grid_step multiple strictly below that score.
    """
    if not (0.0 < target <= 1.0):
        raise ValidationError(f"target sensitivity must be in (0, 1], got {target}")
    pos, _ = _require_both_labels(scores)
    n_pos = len(pos)
    m = max(1, math.ceil(target * n_pos - 1e-9))
    s_m = float(np.sort(pos)[n_pos - m])  # m-th largest COVID score

    k = math.floor(s_m / grid_step)
    while k * grid_step >= s_m:  # float fuzz: step down until strictly below
        k -= 1
    while (k + 1) * grid_step < s_m:  # step up while the next multiple still qualifies
        k += 1
    return k * grid_step


def confidence_interval(accuracy: float, n: int, z: float = DEFAULT_Z) -> ConfidenceInterval:
    """Wald half-width r = z * sqrt(accuracy * (1 - accuracy) / n).

    Implemented exactly as stated; degenerates to r = 0 at accuracy 0 or 1
    (no continuity correction), which is the documented limitation.
    """
    if not (0.0 <= accuracy <= 1.0):
        raise ValidationError(f"accuracy must be in [0, 1], got {accuracy}")
    if n < 1:
        raise ValidationError(f"n must be >= 1, got {n}")
    if z <= 0:
        raise ValidationError(f"z must be > 0, got {z}")
    r = z * math.sqrt(accuracy * (1.0 - accuracy) / n)
    return ConfidenceInterval(accuracy=accuracy, n=n, z=z, r=r)


def roc_curve(scores: ScoreSet) -> list[tuple[float, float]]:
    """(fpr, tpr) vertices at every distinct score as threshold plus endpoints.

    Tied scores contribute a single vertex, so a tie group appears as one
    diagonal segment and the trapezoidal area matches the Mann-Whitney
    statistic with half credit for ties.
    """
    pos, neg = _require_both_labels(scores)
    n_pos, n_neg = len(pos), len(neg)
    all_scores = np.concatenate([pos, neg])
    is_pos = np.concatenate([np.ones(n_pos, dtype=bool), np.zeros(n_neg, dtype=bool)])
    order = np.argsort(-all_scores, kind="stable")
    all_scores, is_pos = all_scores[order], is_pos[order]

    points: list[tuple[float, float]] = [(0.0, 0.0)]
    tp = fp = 0
    i = 0
    n = len(all_scores)
    while i < n:
        j = i
        while j < n and all_scores[j] == all_scores[i]:
            tp += int(is_pos[j])
            fp += int(not is_pos[j])
            j += 1
        pt = (fp / n_neg, tp / n_pos)
        if pt != points[-1]:
            points.append(pt)
        i = j
    if points[-1] != (1.0, 1.0):
        points.append((1.0, 1.0))
    return points


def auc(roc: list[tuple[float, float]]) -> float:
    """Trapezoidal area under an ROC point list."""
    if len(roc) < 2:
        raise ValidationError("ROC needs at least two points")
    area = 0.0
    for (x1, y1), (x2, y2) in zip(roc, roc[1:]):
        if x2 < x1 or y2 < y1:
            raise ValidationError("ROC points must be non-decreasing in both coordinates")
        area += (x2 - x1) * (y1 + y2) / 2.0
    return area


def confusion_matrix(scores: ScoreSet, threshold: float) -> list[list[int]]:
    """[[tn, fp], [fn, tp]] at the given threshold; consistent with operating_point."""
    op = operating_point(scores, threshold)
    return [[op.tn, op.fp], [op.fn, op.tp]]


def score_histogram(scores: ScoreSet, bins: int) -> dict[str, list[int]]:
    """Per-subgroup counts over equal-width bins spanning [0, 1].

    Bin convention: [lo, hi) with the final bin closed, so a score of exactly
    1.0 lands in the last bin.
    """
    if bins < 1:
        raise ValidationError(f"bins must be >= 1, got {bins}")
    hists: dict[str, list[int]] = {g.value: [0] * bins for g in Subgroup}
    for e in scores.entries:
        idx = min(int(math.floor(e.score * bins)), bins - 1)
        idx = max(idx, 0)
        hists[e.subgroup.value][idx] += 1
    return hists


@dataclass(frozen=True)
class EvalReport:
    sweep: list[OperatingPoint]
    roc: list[tuple[float, float]]
    auc: float
    confusion: list[list[int]]
    histograms: dict[str, list[int]]
    sensitivity_ci: ConfidenceInterval
    specificity_ci: ConfidenceInterval
    threshold: float
    bins: int
    target_sensitivity: float


def build_eval_report(
    scores: ScoreSet,
    bins: int = DEFAULT_BINS,
    target_sensitivity: float = DEFAULT_TARGET_SENSITIVITY,
    z: float = DEFAULT_Z,
    thresholds: np.ndarray | None = None,
) -> EvalReport:
    """Run the full evaluation suite at the chosen-sensitivity operating point."""
    grid = default_sweep_grid(scores) if thresholds is None else np.asarray(thresholds)
    sweep = threshold_sweep(scores, grid)
    roc = roc_curve(scores)
    area = auc(roc)
    t_star = threshold_for_sensitivity(scores, target_sensitivity)
    op = operating_point(scores, t_star)
    return EvalReport(
        sweep=sweep,
        roc=roc,
        auc=area,
        confusion=confusion_matrix(scores, t_star),
        histograms=score_histogram(scores, bins),
        sensitivity_ci=confidence_interval(op.sensitivity, op.tp + op.fn, z),
        specificity_ci=confidence_interval(op.specificity, op.tn + op.fp, z),
        threshold=t_star,
        bins=bins,
        target_sensitivity=target_sensitivity,
    )


# ---------------------------------------------------------------------------
# Report serialization
# ---------------------------------------------------------------------------

def _op_dict(op: OperatingPoint) -> dict:
    return {
        "threshold": op.threshold,
        "sensitivity": op.sensitivity,
        "specificity": op.specificity,
        "tp": op.tp,
        "fn": op.fn,
        "tn": op.tn,
        "fp": op.fp,
    }


def _ci_dict(ci: ConfidenceInterval) -> dict:
    return {"accuracy": ci.accuracy, "n": ci.n, "z": ci.z, "r": ci.r}


def report_to_dict(report: EvalReport, config_echo: dict | None = None) -> dict:
    doc = {
        "sweep": [_op_dict(op) for op in report.sweep],
        "roc": [[x, y] for x, y in report.roc],
        "auc": report.auc,
        "confusion": report.confusion,
        "histograms": report.histograms,
        "sensitivity_ci": _ci_dict(report.sensitivity_ci),
        "specificity_ci": _ci_dict(report.specificity_ci),
        "threshold": report.threshold,
        "bins": report.bins,
        "target_sensitivity": report.target_sensitivity,
    }
    if config_echo is not None:
        doc["config"] = config_echo
    return doc


def save_report(report: EvalReport, path: str | Path, config_echo: dict | None = None) -> None:
    doc = report_to_dict(report, config_echo)
    Path(path).write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")


def load_report(path: str | Path) -> dict:
    p = Path(path)
    if not p.is_file():
        raise InputError(f"report not found: {p}")
    return json.loads(p.read_text(encoding="utf-8"))
