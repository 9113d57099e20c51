"""Instance-segmentation metrics: COCO-style mask AP, mAP/wmAP, single-class mAP and best-match mIoU.

Predictions and ground truth are passed as ``{image_id: [Detection | GroundTruth, ...]}``.
Image iteration order follows the ground-truth mapping, which also fixes the
tie-breaking between equal scores from different images.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .structures import Detection, GroundTruth, mask_iou_matrix

log = logging.getLogger(__name__)

COCO_IOU_THRESHOLDS = tuple(np.round(np.linspace(0.5, 0.95, 10), 2).tolist())
RECALL_POINTS = np.linspace(0.0, 1.0, 101)
SINGLE_CLASS = "tree"

Predictions = Mapping[str, Sequence[Detection]]
GroundTruths = Mapping[str, Sequence[GroundTruth]]


@dataclass
class MatchResult:
    """Greedy matching of one image's predictions (already score-sorted) to its GT.

    ``pred_tp[t, j]`` flags prediction ``j`` as a true positive at threshold ``t``;
    ``gt_match[t, i]`` is the matched prediction index or -1.
    """

    gt_match: np.ndarray
    gt_best_iou: np.ndarray
    pred_tp: np.ndarray


def match_image(iou: np.ndarray, thresholds: Sequence[float]) -> MatchResult:
    """``iou`` has shape ``(n_pred, n_gt)`` with rows in descending score order.

    Each prediction takes the unmatched GT of highest IoU at or above the
    threshold; equal IoUs go to the lower GT index.
    """
    n_pred, n_gt = iou.shape
    gt_match = np.full((len(thresholds), n_gt), -1, dtype=np.int64)
    pred_tp = np.zeros((len(thresholds), n_pred), dtype=bool)
    for t, thr in enumerate(thresholds):
        taken = np.zeros(n_gt, dtype=bool)
        for j in range(n_pred):
            cand = np.where(~taken & (iou[j] >= thr), iou[j], -1.0)
            if n_gt == 0 or cand.max() < 0:
                continue
            g = int(np.argmax(cand))
            taken[g] = True
            gt_match[t, g] = j
            pred_tp[t, j] = True
    best = iou.max(axis=0) if n_pred else np.zeros(n_gt)
    return MatchResult(gt_match=gt_match, gt_best_iou=best, pred_tp=pred_tp)


def interpolated_ap(tp: np.ndarray, n_gt: int) -> float:
    """101-point interpolated AP from TP flags already in global ranking order."""
    if n_gt == 0:
        raise ValueError("AP undefined without ground truth")
    if len(tp) == 0:
        return 0.0
    tps = np.cumsum(tp)
    fps = np.cumsum(~tp)
    recall = tps / n_gt
    precision = tps / (tps + fps)
    # precision envelope: max precision at any recall >= current
    precision = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    sampled = np.where(idx < len(precision), precision[np.minimum(idx, len(precision) - 1)], 0.0)
    return float(sampled.mean())


def _class_instances(items, label, use_score=False, max_dets=None):
    sel = [d for d in items if d.class_label == label]
    if use_score:
        order = np.argsort(-np.array([d.score for d in sel]), kind="stable")
        sel = [sel[i] for i in order]
        if max_dets is not None:
            sel = sel[:max_dets]
    return sel


def average_precision(
    predictions: Predictions,
    ground_truth: GroundTruths,
    class_label: str,
    iou_thresholds: Sequence[float] = COCO_IOU_THRESHOLDS,
    max_dets: Optional[int] = 100,
) -> Optional[float]:
    """COCO-convention mask AP for one class, averaged over ``iou_thresholds``.

    Returns ``None`` (and logs a warning) when the class has no GT instance.
    """
    image_ids = list(ground_truth) + [k for k in predictions if k not in ground_truth]
    n_gt = 0
    scores, tps = [], []
    for img in image_ids:
        gts = _class_instances(ground_truth.get(img, ()), class_label)
        preds = _class_instances(predictions.get(img, ()), class_label, use_score=True, max_dets=max_dets)
        n_gt += len(gts)
        if not preds:
            continue
        if gts:
            iou = mask_iou_matrix(np.stack([p.mask for p in preds]), np.stack([g.mask for g in gts]))
        else:
            iou = np.zeros((len(preds), 0))
        res = match_image(iou, iou_thresholds)
        scores.append(np.array([p.score for p in preds]))
        tps.append(res.pred_tp)
    if n_gt == 0:
        log.warning("class %r absent from ground truth; AP undefined", class_label)
        return None
    if not scores:
        return 0.0
    all_scores = np.concatenate(scores)
    all_tp = np.concatenate(tps, axis=1)
    order = np.argsort(-all_scores, kind="mergesort")
    return float(np.mean([interpolated_ap(all_tp[t, order], n_gt) for t in range(len(iou_thresholds))]))


def per_class_average_precision(
    predictions: Predictions,
    ground_truth: GroundTruths,
    classes: Optional[Iterable[str]] = None,
    iou_thresholds: Sequence[float] = COCO_IOU_THRESHOLDS,
    max_dets: Optional[int] = 100,
) -> dict[str, float]:
    if classes is None:
        classes = sorted({g.class_label for gts in ground_truth.values() for g in gts})
    out = {}
    for c in classes:
        ap = average_precision(predictions, ground_truth, c, iou_thresholds, max_dets)
        if ap is not None:
            out[c] = ap
    return out


def aggregate(per_class_ap: Mapping[str, float], weights: Optional[Mapping[str, float]] = None) -> float:
    """Unweighted mean of class APs (mAP) or, with ``weights``, their weighted sum (wmAP).

    ``weights`` may be a :class:`~crownseg.taxonomy.ClassWeights` or a plain
    mapping; it must cover exactly the evaluated classes and is renormalised
    over them.
    """
    if not per_class_ap:
        raise ValueError("no classes to aggregate")
    if weights is None:
        return float(np.mean(list(per_class_ap.values())))
    w = dict(getattr(weights, "weights", weights))
    if set(w) != set(per_class_ap):
        raise ValueError(
            f"weight/class mismatch: missing {sorted(set(per_class_ap) - set(w))}, "
            f"extra {sorted(set(w) - set(per_class_ap))}"
        )
    total = sum(w.values())
    if total <= 0:
        raise ValueError("weights sum to zero")
    return float(sum(w[c] / total * per_class_ap[c] for c in per_class_ap))


def _collapse(items: GroundTruths | Predictions) -> dict:
    return {k: [d.with_label(SINGLE_CLASS) if isinstance(d, Detection) else GroundTruth(d.mask, SINGLE_CLASS)
                for d in v] for k, v in items.items()}


def mean_iou(predictions: Predictions, ground_truth: GroundTruths) -> float:
    """Mean over GT instances of the best mask IoU against any prediction in the same image.

    Scores and classes are ignored and one prediction may serve several GT
    instances, so false positives can never lower the value.
    """
    vals = []
    for img, gts in ground_truth.items():
        if not gts:
            continue
        preds = predictions.get(img, ())
        if not preds:
            vals.extend([0.0] * len(gts))
            continue
        iou = mask_iou_matrix(np.stack([p.mask for p in preds]), np.stack([g.mask for g in gts]))
        vals.extend(iou.max(axis=0).tolist())
    if not vals:
        raise ValueError("no ground truth")
    return float(np.mean(vals))


def single_class_collapse(
    predictions: Predictions,
    ground_truth: GroundTruths,
    iou_thresholds: Sequence[float] = COCO_IOU_THRESHOLDS,
) -> tuple[float, float]:
    """(mAP, mIoU) after relabelling every instance as a single "tree" class."""
    preds, gts = _collapse(predictions), _collapse(ground_truth)
    if not any(gts.values()):
        return 0.0, 0.0
    ap = average_precision(preds, gts, SINGLE_CLASS, iou_thresholds)
    return float(ap), mean_iou(preds, gts)


@dataclass
class MetricsReport:
    per_class_ap: dict[str, float]
    map: float
    wmap: float
    single_class_map: float
    miou: float
    iou_thresholds: list[float] = field(default_factory=lambda: list(COCO_IOU_THRESHOLDS))
    # filled by seed aggregation: metric -> standard error (None for a single run)
    stderr: dict[str, Optional[float]] = field(default_factory=dict)
    n_seeds: int = 1

    def to_dict(self) -> dict:
        return asdict(self)

    def table(self) -> str:
        """Per-class AP table in percent, one row per class."""
        lines = ["class\tAP"]
        for c, ap in self.per_class_ap.items():
            se = self.stderr.get(f"ap:{c}")
            lines.append(f"{c}\t{100 * ap:.2f}" + (f" (±{100 * se:.2f})" if se else ""))
        for key in ("map", "wmap", "single_class_map", "miou"):
            se = self.stderr.get(key)
            lines.append(f"{key}\t{100 * getattr(self, key):.2f}" + (f" (±{100 * se:.2f})" if se else ""))
        return "\n".join(lines) + "\n"


def evaluate(
    predictions: Predictions,
    ground_truth: GroundTruths,
    classes: Optional[Sequence[str]] = None,
    iou_thresholds: Sequence[float] = COCO_IOU_THRESHOLDS,
) -> MetricsReport:
    from .taxonomy import test_proportion_weights

    per_class = per_class_average_precision(predictions, ground_truth, classes, iou_thresholds)
    counts: dict[str, int] = {}
    for gts in ground_truth.values():
        for g in gts:
            counts[g.class_label] = counts.get(g.class_label, 0) + 1
    counts = {c: counts[c] for c in per_class}
    sc_map, miou = single_class_collapse(predictions, ground_truth, iou_thresholds)
    return MetricsReport(
        per_class_ap=per_class,
        map=aggregate(per_class) if per_class else 0.0,
        wmap=aggregate(per_class, test_proportion_weights(counts)) if per_class else 0.0,
        single_class_map=sc_map,
        miou=miou,
        iou_thresholds=[float(t) for t in iou_thresholds],
    )


def mean_and_stderr(values: Sequence[float]) -> tuple[float, Optional[float]]:
    """Mean and standard error of the mean; the error is ``None`` for one value."""
    arr = np.asarray(values, dtype=np.float64)
    if len(arr) == 0:
        raise ValueError("no values")
    if len(arr) == 1:
        return float(arr[0]), None
    if np.all(arr == arr[0]):
        return float(arr[0]), 0.0
    return float(arr.mean()), float(arr.std(ddof=1) / math.sqrt(len(arr)))


def aggregate_reports(reports: Sequence[MetricsReport]) -> MetricsReport:
    """Average several single-seed reports, attaching standard errors."""
    if not reports:
        raise ValueError("need at least one report")
    stderr: dict[str, Optional[float]] = {}
    fields = {}
    for key in ("map", "wmap", "single_class_map", "miou"):
        fields[key], stderr[key] = mean_and_stderr([getattr(r, key) for r in reports])
    per_class = {}
    for c in reports[0].per_class_ap:
        per_class[c], stderr[f"ap:{c}"] = mean_and_stderr([r.per_class_ap.get(c, 0.0) for r in reports])
    return MetricsReport(per_class_ap=per_class, iou_thresholds=reports[0].iou_thresholds,
                         stderr=stderr, n_seeds=len(reports), **fields)
