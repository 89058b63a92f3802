"""Pixel and relaxed (distance-tolerant) metrics for thin-structure masks."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Sequence, Tuple

import numpy as np
from scipy import ndimage

METRIC_NAMES = ("precision", "recall", "iou", "f1", "f_beta", "correctness", "completeness", "quality")


@dataclass
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn)


@dataclass
class RelaxedCounts:
    matched_pred: int = 0
    total_pred: int = 0
    matched_gt: int = 0
    total_gt: int = 0
    tolerance_px: float = 2.0

    def __add__(self, other: "RelaxedCounts") -> "RelaxedCounts":
        return RelaxedCounts(self.matched_pred + other.matched_pred, self.total_pred + other.total_pred,
                             self.matched_gt + other.matched_gt, self.total_gt + other.total_gt, self.tolerance_px)


@dataclass
class MetricsReport:
    precision: float
    recall: float
    iou: float
    f1: float
    f_beta: float
    correctness: float
    completeness: float
    quality: float
    counts: ConfusionCounts
    relaxed: RelaxedCounts
    aggregation: str = "micro"
    config: dict = field(default_factory=dict)
    per_image: List[dict] = field(default_factory=list)

    def metrics(self) -> Dict[str, float]:
        return {k: getattr(self, k) for k in METRIC_NAMES}

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    def csv_row(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(METRIC_NAMES)
        w.writerow([f"{getattr(self, k):.6f}" for k in METRIC_NAMES])
        return buf.getvalue()


def _binary(a, name: str) -> np.ndarray:
    a = np.asarray(a)
    if a.dtype != bool and not np.isin(a, (0, 1)).all():
        raise ValueError(f"{name} must be binary (0/1)")
    return a.astype(bool)


def _pair(pred, gt) -> Tuple[np.ndarray, np.ndarray]:
    pred, gt = _binary(pred, "pred"), _binary(gt, "gt")
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    return pred, gt


def ratio(num: float, den: float, both_empty: bool) -> float:
    """num/den with 0/0 -> 1 when both sets are empty, else 0."""
    if den == 0:
        return 1.0 if both_empty else 0.0
    return num / den


def f_beta_score(precision: float, recall: float, beta: float) -> float:
    b2 = beta * beta
    den = b2 * precision + recall
    return (1 + b2) * precision * recall / den if den > 0 else 0.0


def quality_score(correctness: float, completeness: float) -> float:
    den = completeness - completeness * correctness + correctness
    return completeness * correctness / den if den > 0 else 0.0


def confusion_counts(pred, gt) -> ConfusionCounts:
    pred, gt = _pair(pred, gt)
    tp = int(np.count_nonzero(pred & gt))
    fp = int(np.count_nonzero(pred & ~gt))
    fn = int(np.count_nonzero(~pred & gt))
    return ConfusionCounts(tp, fp, fn, int(pred.size) - tp - fp - fn)


def metrics_from_counts(c: ConfusionCounts, beta: float = 0.3) -> Dict[str, float]:
    empty = c.tp + c.fp + c.fn == 0
    p = ratio(c.tp, c.tp + c.fp, empty)
    r = ratio(c.tp, c.tp + c.fn, empty)
    return {
        "precision": p,
        "recall": r,
        "iou": ratio(c.tp, c.tp + c.fp + c.fn, empty),
        "f1": 1.0 if empty else f_beta_score(p, r, 1.0),
        "f_beta": 1.0 if empty else f_beta_score(p, r, beta),
    }


def pixel_metrics(pred, gt, beta: float = 0.3):
    """(precision, recall, iou, f1, f_beta, ConfusionCounts)."""
    c = confusion_counts(pred, gt)
    m = metrics_from_counts(c, beta)
    return m["precision"], m["recall"], m["iou"], m["f1"], m["f_beta"], c


def _distance_to(mask: np.ndarray, metric: str) -> np.ndarray:
    """Distance from every pixel to the nearest ``True`` pixel of ``mask``."""
    if not mask.any():
        return np.full(mask.shape, np.inf)
    if metric == "euclidean":
        return ndimage.distance_transform_edt(~mask)
    if metric == "chebyshev":
        return ndimage.distance_transform_cdt(~mask, metric="chessboard").astype(float)
    raise ValueError(f"unknown distance metric {metric!r}")


def relaxed_counts(pred, gt, d: float = 2.0, metric: str = "euclidean") -> RelaxedCounts:
    pred, gt = _pair(pred, gt)
    if d < 0:
        raise ValueError("tolerance must be non-negative")
    near_gt = _distance_to(gt, metric) <= d
    near_pred = _distance_to(pred, metric) <= d
    return RelaxedCounts(
        matched_pred=int(np.count_nonzero(pred & near_gt)),
        total_pred=int(np.count_nonzero(pred)),
        matched_gt=int(np.count_nonzero(gt & near_pred)),
        total_gt=int(np.count_nonzero(gt)),
        tolerance_px=float(d),
    )


def metrics_from_relaxed(c: RelaxedCounts) -> Dict[str, float]:
    empty = c.total_pred == 0 and c.total_gt == 0
    corr = ratio(c.matched_pred, c.total_pred, empty)
    comp = ratio(c.matched_gt, c.total_gt, empty)
    return {"correctness": corr, "completeness": comp, "quality": 1.0 if empty else quality_score(corr, comp)}


def relaxed_metrics(pred, gt, d: float = 2.0, metric: str = "euclidean"):
    """(correctness, completeness, quality, RelaxedCounts) with match tolerance ``d`` pixels."""
    c = relaxed_counts(pred, gt, d, metric)
    m = metrics_from_relaxed(c)
    return m["correctness"], m["completeness"], m["quality"], c


def evaluate_dataset(preds: Sequence, gts: Sequence, tolerance: float = 2.0, beta: float = 0.3,
                     aggregation: str = "micro", metric: str = "euclidean",
                     ids: Sequence[str] | None = None) -> MetricsReport:
    if len(preds) != len(gts):
        raise ValueError(f"got {len(preds)} predictions but {len(gts)} ground truths")
    if not preds:
        raise ValueError("nothing to evaluate")
    if aggregation not in ("micro", "macro"):
        raise ValueError(f"aggregation must be micro or macro, got {aggregation!r}")
    ids = list(ids) if ids is not None else [str(i) for i in range(len(preds))]

    counts, relaxed, rows = ConfusionCounts(), RelaxedCounts(tolerance_px=tolerance), []
    for key, p, g in zip(ids, preds, gts):
        c = confusion_counts(p, g)
        rc = relaxed_counts(p, g, tolerance, metric)
        counts, relaxed = counts + c, relaxed + rc
        rows.append({"id": key, **metrics_from_counts(c, beta), **metrics_from_relaxed(rc),
                     "tp": c.tp, "fp": c.fp, "fn": c.fn, "tn": c.tn})

    if aggregation == "micro":
        values = {**metrics_from_counts(counts, beta), **metrics_from_relaxed(relaxed)}
    else:
        values = {k: float(np.mean([r[k] for r in rows])) for k in METRIC_NAMES}
    config = {"tolerance": tolerance, "beta": beta, "aggregation": aggregation, "distance": metric}
    return MetricsReport(**values, counts=counts, relaxed=relaxed, aggregation=aggregation,
                         config=config, per_image=rows)
