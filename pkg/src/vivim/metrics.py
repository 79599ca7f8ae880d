"""Region overlap metrics, threshold sweeps and MAE for binary segmentation.

Empty-set convention: a ratio whose denominator is zero is 1 when both the
prediction and the ground truth are empty and 0 otherwise.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .tensor import ShapeError, Tensor


@dataclass
class MetricReport:
    dice: float
    jaccard: float
    precision: float
    recall: float
    mae: float
    max_dice: float
    max_spe: float
    max_iou: float

    def as_dict(self) -> dict[str, float]:
        return asdict(self)


def _arrays(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(pred.data if isinstance(pred, Tensor) else pred, dtype=np.float64)
    g = np.asarray(gt.data if isinstance(gt, Tensor) else gt, dtype=np.float64)
    if p.shape != g.shape:
        raise ShapeError(f"prediction {p.shape} and ground truth {g.shape} differ")
    return p, g


def _ratio(num: float, den: float, both_empty: bool) -> float:
    if den == 0:
        return 1.0 if both_empty else 0.0
    return num / den


def _counts(binary: np.ndarray, g: np.ndarray) -> tuple[float, float, float, float]:
    tp = float(np.sum(binary & g))
    fp = float(np.sum(binary & ~g))
    fn = float(np.sum(~binary & g))
    tn = float(np.sum(~binary & ~g))
    return tp, fp, fn, tn


def _scores(tp, fp, fn, tn) -> dict[str, float]:
    n_pred, n_gt = tp + fp, tp + fn
    both_empty = n_pred == 0 and n_gt == 0
    return {
        "dice": _ratio(2 * tp, n_pred + n_gt, both_empty),
        "jaccard": _ratio(tp, tp + fp + fn, both_empty),
        "precision": _ratio(tp, n_pred, both_empty),
        "recall": _ratio(tp, n_gt, both_empty),
        # no negatives in the ground truth: specificity is perfect unless something is predicted
        "specificity": _ratio(tn, tn + fp, fp == 0),
    }


def region_metrics(pred, gt, threshold: float = 0.5) -> tuple[float, float, float, float]:
    """(dice, jaccard, precision, recall) of ``pred >= threshold`` against ``gt``."""
    p, g = _arrays(pred, gt)
    s = _scores(*_counts(p >= threshold, g > 0.5))
    return s["dice"], s["jaccard"], s["precision"], s["recall"]


def specificity(pred, gt, threshold: float = 0.5) -> float:
    p, g = _arrays(pred, gt)
    return _scores(*_counts(p >= threshold, g > 0.5))["specificity"]


def sweep_thresholds(levels: int = 256) -> np.ndarray:
    return np.arange(levels) / levels


def threshold_sweep(pred, gt, levels: int = 256) -> tuple[float, float, float]:
    """(max dice, max specificity, max IoU) over ``levels`` thresholds in [0, 1)."""
    p, g = _arrays(pred, gt)
    g = g > 0.5
    best = {"dice": 0.0, "specificity": 0.0, "jaccard": 0.0}
    for thr in sweep_thresholds(levels):
        s = _scores(*_counts(p >= thr, g))
        for key in best:
            best[key] = max(best[key], s[key])
    return best["dice"], best["specificity"], best["jaccard"]


def mae(pred, gt) -> float:
    p, g = _arrays(pred, gt)
    return float(np.mean(np.abs(p - g)))


def metric_report(pred, gt, threshold: float = 0.5, levels: int = 256) -> MetricReport:
    dice, jac, prec, rec = region_metrics(pred, gt, threshold)
    max_dice, max_spe, max_iou = threshold_sweep(pred, gt, levels)
    return MetricReport(dice, jac, prec, rec, mae(pred, gt), max_dice, max_spe, max_iou)


def mean_report(reports: list[MetricReport]) -> MetricReport:
    if not reports:
        raise ValueError("no reports to average")
    keys = MetricReport.__dataclass_fields__.keys()
    return MetricReport(**{k: float(np.mean([getattr(r, k) for r in reports])) for k in keys})
