"""Ground-truth mAP evaluation for labeled sample sets.

Standard 101-point interpolated average precision over IoU thresholds
0.50:0.05:0.95, pooled across images with deterministic ordering. Used to
produce regression targets and to validate label-free predictions; classes
absent from a set's ground truth are excluded from means rather than scored
as zero.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .dumps import ImageRecord
from .errors import ScoreUndefinedError, ValidationError
from .geometry import iou_matrix

__all__ = ["COCO_THRESHOLDS", "MapReport", "average_precision", "evaluate_detections"]

COCO_THRESHOLDS: tuple[float, ...] = tuple((50 + 5 * i) / 100 for i in range(10))

_RECALL_GRID = np.arange(101) / 100.0


@dataclass(frozen=True)
class MapReport:
    """AP per (class, threshold) plus the usual aggregates.

    map50 / map75 are None when the corresponding threshold was not evaluated.
    per_class averages over thresholds for each class present in ground truth.
    """

    ap: dict[tuple[int, float], float]
    map_all: float
    map50: float | None
    map75: float | None
    per_class: dict[int, float]


def average_precision(pr_points: list[tuple[float, float]]) -> float:
    """101-point interpolated AP from a precision/recall curve.

    At each recall grid value r in {0, 0.01, ..., 1.00} the interpolated
    precision is the maximum precision among points with recall >= r; AP is
    the mean over the grid. An empty curve scores 0.
    """
    if not pr_points:
        return 0.0
    recalls = np.array([r for r, _ in pr_points], dtype=np.float64)
    precisions = np.array([p for _, p in pr_points], dtype=np.float64)
    if np.any(np.diff(recalls) < 0):
        raise ValidationError("recalls must be non-decreasing", field="pr_points")
    # Running max from the right gives, at index i, the best precision among
    # points with recall >= recalls[i].
    best_right = np.maximum.accumulate(precisions[::-1])[::-1]
    idx = np.searchsorted(recalls, _RECALL_GRID, side="left")
    interp = np.where(idx < len(recalls), best_right[np.minimum(idx, len(recalls) - 1)], 0.0)
    return float(interp.mean())


def _validate_thresholds(thresholds) -> tuple[float, ...]:
    ts = tuple(float(t) for t in thresholds)
    if not ts:
        raise ValidationError("thresholds must be non-empty", field="thresholds")
    if any(not 0.0 < t <= 1.0 for t in ts):
        raise ValidationError("each threshold must lie in (0, 1]", field="thresholds")
    return ts


def evaluate_detections(records: list[ImageRecord], pass_selector: str = "original",
                        thresholds=COCO_THRESHOLDS) -> MapReport:
    """COCO-style mAP of one pass against ground truth.

    Detections are pooled across images and ranked by confidence descending
    (ties by image_id, then box order). Greedy matching per (class, threshold):
    each detection claims the highest-IoU unconsumed same-class ground-truth
    box of its image with IoU at or above the threshold; each ground-truth box
    is consumed at most once.
    """
    if pass_selector not in ("original", "perturbed"):
        raise ValidationError(f"unknown pass selector {pass_selector!r}", field="pass_selector")
    ts = _validate_thresholds(thresholds)
    for rec in records:
        if rec.ground_truth is None:
            raise ValidationError(f"image {rec.image_id!r} lacks ground truth",
                                  field="ground_truth")

    gt_boxes: dict[tuple[str, int], np.ndarray] = {}
    gt_count: dict[int, int] = {}
    staging: dict[tuple[str, int], list] = {}
    for rec in records:
        for bbox, cls in rec.ground_truth:
            staging.setdefault((rec.image_id, cls), []).append(bbox.as_tuple())
            gt_count[cls] = gt_count.get(cls, 0) + 1
    for key, rows in staging.items():
        gt_boxes[key] = np.array(rows, dtype=np.float64)
    classes = sorted(gt_count)
    if not classes:
        raise ScoreUndefinedError("no ground-truth objects in any record")

    pooled: dict[int, list] = {cls: [] for cls in classes}
    for rec in records:
        dets = rec.original if pass_selector == "original" else rec.perturbed
        for idx, det in enumerate(dets):
            if det.class_id in pooled:
                pooled[det.class_id].append((det.score, rec.image_id, idx, det.bbox))
    # Detections of classes with no ground truth anywhere are dropped entirely;
    # their class is excluded from the report rather than scored.

    ap: dict[tuple[int, float], float] = {}
    for cls in classes:
        dets = sorted(pooled[cls], key=lambda item: (-item[0], item[1], item[2]))
        n_gt = gt_count[cls]

        # IoU row per detection against its image's same-class ground truths,
        # computed once and shared across thresholds.
        per_image: dict[str, list] = {}
        det_rows: list[tuple[str, int]] = []
        for _, image_id, _, bbox in dets:
            rows = per_image.setdefault(image_id, [])
            det_rows.append((image_id, len(rows)))
            rows.append(bbox.as_tuple())
        iou_rows: dict[str, np.ndarray] = {}
        for image_id, rows in per_image.items():
            gts = gt_boxes.get((image_id, cls))
            if gts is None:
                iou_rows[image_id] = np.zeros((len(rows), 0))
            else:
                iou_rows[image_id] = iou_matrix(np.array(rows, dtype=np.float64), gts)

        for thr in ts:
            consumed: dict[str, set[int]] = {}
            tp = 0
            points: list[tuple[float, float]] = []
            for rank, (image_id, row) in enumerate(det_rows, start=1):
                ious = iou_rows[image_id][row]
                used = consumed.setdefault(image_id, set())
                best_iou = 0.0
                best_idx = None
                for gi in range(ious.shape[0]):
                    if gi in used:
                        continue
                    if ious[gi] >= thr and ious[gi] > best_iou:
                        best_iou = float(ious[gi])
                        best_idx = gi
                if best_idx is not None:
                    used.add(best_idx)
                    tp += 1
                points.append((tp / n_gt, tp / rank))
            ap[(cls, thr)] = average_precision(points)

    per_class = {cls: float(np.mean([ap[(cls, t)] for t in ts])) for cls in classes}
    map_all = float(np.mean([ap[(cls, t)] for cls in classes for t in ts]))

    def _at(target: float) -> float | None:
        hits = [t for t in ts if math.isclose(t, target, abs_tol=1e-9)]
        if not hits:
            return None
        return float(np.mean([ap[(cls, hits[0])] for cls in classes]))

    return MapReport(ap=ap, map_all=map_all, map50=_at(0.50), map75=_at(0.75),
                     per_class=per_class)
