"""Binary-score evaluation: exact ROC sweep, AUROC, fixed operating points,
confusion-matrix summaries, and shared-range score histograms.

The ROC curve is the exact step function of the empirical score
distribution: thresholds are the distinct score values (prediction is
``score >= threshold`` while sweeping), ties are grouped into single curve
points, and a virtual +inf threshold anchors (0, 0).  Nothing here
interpolates: AUROC integrates the step curve trapezoidally (equal to the
Mann-Whitney statistic with ties counted half), and the fixed-rate lookups
pick achieved curve points conservatively.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from trackmon.objects import DomainError


@dataclass(frozen=True)
class RocCurve:
    """Achieved (fpr, tpr) operating points, highest threshold first."""

    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray  # thresholds[0] is +inf (predict nothing)

    def __len__(self) -> int:
        return len(self.fpr)


def _check_scores_labels(scores, labels, need_both_classes: bool = True):
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.ndim != 1 or labels.shape != scores.shape:
        raise DomainError(
            f"scores and labels must be equal-length 1-d arrays, got "
            f"{scores.shape} and {labels.shape}"
        )
    if scores.size < 2:
        raise DomainError("need at least two scored samples")
    if not np.isfinite(scores).all():
        raise DomainError("scores contain non-finite values")
    label_set = set(np.unique(labels).tolist())
    if not label_set <= {0, 1}:
        raise DomainError(f"labels must be 0/1, got values {sorted(label_set)}")
    if need_both_classes and label_set != {0, 1}:
        raise DomainError("metric needs both classes present")
    return scores, labels.astype(np.int64)


def roc_curve(scores, labels) -> RocCurve:
    """Exact ROC sweep over distinct score values, descending."""
    scores, labels = _check_scores_labels(scores, labels)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    y = labels[order]
    # last index of every tie group
    boundary = np.flatnonzero(np.diff(s) != 0)
    ends = np.concatenate([boundary, [s.size - 1]])
    tps = np.cumsum(y)[ends]
    fps = np.cumsum(1 - y)[ends]
    fpr = np.concatenate([[0.0], fps / n_neg])
    tpr = np.concatenate([[0.0], tps / n_pos])
    thresholds = np.concatenate([[np.inf], s[ends]])
    return RocCurve(fpr=fpr, tpr=tpr, thresholds=thresholds)


def auroc(scores, labels) -> float:
    """Trapezoidal area under the exact ROC step curve."""
    curve = roc_curve(scores, labels)
    return float(np.trapezoid(curve.tpr, curve.fpr))


def fpr_at_tpr(scores, labels, tpr_target: float = 0.95) -> float:
    """Smallest achieved FPR among curve points with TPR >= target.

    No interpolation: the answer is always an operating point the score set
    actually achieves ((1, 1) guarantees one exists for targets <= 1).
    """
    if not (0.0 <= tpr_target <= 1.0):
        raise DomainError(f"tpr_target must lie in [0, 1], got {tpr_target}")
    curve = roc_curve(scores, labels)
    ok = curve.tpr >= tpr_target
    return float(curve.fpr[ok].min())


def tpr_at_fpr(scores, labels, fpr_target: float) -> float:
    """Largest achieved TPR among curve points with FPR <= target."""
    if not (0.0 <= fpr_target <= 1.0):
        raise DomainError(f"fpr_target must lie in [0, 1], got {fpr_target}")
    curve = roc_curve(scores, labels)
    ok = curve.fpr <= fpr_target
    return float(curve.tpr[ok].max())


def confusion_metrics(scores, labels, threshold: float) -> dict:
    """Counts and summary statistics at a fixed threshold (positive iff
    score > threshold, matching the calibrated-threshold prediction rule).

    F1 is 0 when its denominator vanishes; MCC is defined as 0 whenever a
    confusion-matrix marginal is zero.
    """
    scores, labels = _check_scores_labels(scores, labels, need_both_classes=False)
    pred = scores > threshold
    pos = labels == 1
    tp = int(np.sum(pred & pos))
    fp = int(np.sum(pred & ~pos))
    fn = int(np.sum(~pred & pos))
    tn = int(np.sum(~pred & ~pos))
    accuracy = (tp + tn) / labels.size
    f1_den = 2 * tp + fp + fn
    f1 = (2 * tp / f1_den) if f1_den > 0 else 0.0
    mcc_den = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn)
    mcc = ((tp * tn - fp * fn) / np.sqrt(mcc_den)) if mcc_den > 0 else 0.0
    tpr = tp / (tp + fn) if (tp + fn) > 0 else 0.0
    fpr = fp / (fp + tn) if (fp + tn) > 0 else 0.0
    return {
        "threshold": float(threshold),
        "tp": tp,
        "fp": fp,
        "fn": fn,
        "tn": tn,
        "accuracy": float(accuracy),
        "f1": float(f1),
        "mcc": float(mcc),
        "tpr": float(tpr),
        "fpr": float(fpr),
    }


def youden_threshold(scores, labels) -> float:
    """Threshold of the curve point maximizing TPR - FPR.

    Returned as a strict lower bound compatible with the ``score >
    threshold`` prediction rule: the largest representable value strictly
    below the achieving sweep threshold.
    """
    curve = roc_curve(scores, labels)
    j = curve.tpr - curve.fpr
    best = int(np.argmax(j))
    theta = curve.thresholds[best]
    if not np.isfinite(theta):
        return float(np.max(scores))
    return float(np.nextafter(theta, -np.inf))


def score_histogram(groups: dict[str, np.ndarray], bins: int = 30) -> dict:
    """Histogram every named score group over one shared bin range.

    Empty groups yield zero rows; the range comes from the non-empty ones.
    """
    if bins < 1:
        raise DomainError("bins must be >= 1")
    arrays = {name: np.asarray(g, dtype=np.float64).reshape(-1) for name, g in groups.items()}
    non_empty = [a for a in arrays.values() if a.size]
    if not non_empty:
        raise DomainError("all histogram groups are empty")
    lo = min(float(a.min()) for a in non_empty)
    hi = max(float(a.max()) for a in non_empty)
    if lo == hi:
        hi = lo + 1.0
    edges = np.linspace(lo, hi, bins + 1)
    counts = {}
    for name, a in arrays.items():
        c, _ = np.histogram(a, bins=edges)
        counts[name] = c
    return {"bin_edges": edges, "counts": counts}
