"""Bipartite matching of two detection passes and the stability scores built on it.

The smaller detection list is matched injectively into the larger one by
minimizing total GIoU loss (Hungarian assignment). Per-image stability is the
mean IoU of matched pairs; GIoU enters only as the matching cost. The dataset
box stability score averages per-image stability over images where it is
defined; images with an empty pass are skipped, not zero-filled.

Among cost-equal optimal assignments the lexicographically smallest pairing
(by smaller-side index, then larger-side index) is returned so repeated runs
produce identical reports.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .dumps import DetectionRecord, ImageRecord
from .errors import MatchingError, ScoreUndefinedError
from .geometry import BBox, giou_matrix, giou_pairwise, iou_pairwise

__all__ = [
    "ScoreKind",
    "Assignment",
    "StabilityOptions",
    "ImageStability",
    "DatasetScore",
    "match_pairs",
    "image_stability",
    "bos_score",
    "cs_score",
]

_TIE_TOL = 1e-12


class ScoreKind(enum.Enum):
    BOS = "bos"
    CS = "cs"
    PS = "ps"
    ES = "es"
    AC = "ac"
    ATC = "atc"
    FD = "fd"


@dataclass(frozen=True)
class Assignment:
    """Injection of the smaller box list into the larger one.

    pairs[j] = (j, sigma(j)) in ascending j; total_cost is the summed GIoU loss,
    minimal over all injections.
    """

    pairs: tuple[tuple[int, int], ...]
    total_cost: float


@dataclass(frozen=True)
class StabilityOptions:
    """Knobs for per-image stability.

    score_threshold drops low-confidence detections before matching. classwise
    restricts matches to same-class boxes. pair_score picks the per-pair
    agreement measure: "iou" (default) or "giou_rescaled" ((giou + 1) / 2).
    count_penalty multiplies stability by n_matched / max(n_ori, n_per).
    """

    score_threshold: float = 0.3
    classwise: bool = True
    pair_score: str = "iou"
    count_penalty: bool = False

    def __post_init__(self):
        if self.pair_score not in ("iou", "giou_rescaled"):
            raise ValueError(f"unknown pair_score kind {self.pair_score!r}")
        if not 0.0 <= self.score_threshold <= 1.0:
            raise ValueError("score_threshold must lie in [0, 1]")


@dataclass(frozen=True)
class ImageStability:
    """Stability outcome for one image.

    n_ori and n_per count detections surviving the score filter. stability and
    matching_loss are None when either filtered pass is empty.
    """

    n_ori: int
    n_per: int
    n_matched: int
    pair_scores: tuple[float, ...]
    stability: float | None
    matching_loss: float | None

    @property
    def defined(self) -> bool:
        return self.stability is not None


@dataclass(frozen=True)
class DatasetScore:
    kind: ScoreKind
    value: float
    valid_images: int
    skipped_images: int


def _cost_matrix(smaller: list[BBox], larger: list[BBox]) -> np.ndarray:
    arr_s = np.array([b.as_tuple() for b in smaller], dtype=np.float64)
    arr_l = np.array([b.as_tuple() for b in larger], dtype=np.float64)
    return 1.0 - giou_matrix(arr_s, arr_l)


def _solve_forced(cost: np.ndarray, fixed: dict[int, int]) -> tuple[float, dict[int, int]]:
    """Minimal total cost and a full assignment with the given pairs forced."""
    n, m = cost.shape
    base = sum(cost[r, c] for r, c in fixed.items())
    free_rows = [r for r in range(n) if r not in fixed]
    full = dict(fixed)
    if not free_rows:
        return float(base), full
    used = set(fixed.values())
    free_cols = [c for c in range(m) if c not in used]
    sub = cost[np.ix_(free_rows, free_cols)]
    row_ind, col_ind = linear_sum_assignment(sub)
    for i, j in zip(row_ind, col_ind):
        full[free_rows[i]] = free_cols[j]
    return float(base + sub[row_ind, col_ind].sum()), full


def _lexicographic_refine(cost: np.ndarray, incumbent: dict[int, int],
                          best_total: float) -> list[tuple[int, int]]:
    """Smallest (sigma(0), sigma(1), ...) among cost-optimal injections.

    Greedy per row, scanning unused columns in ascending order. The running
    incumbent is a known-optimal completion of the pairs fixed so far, so its
    own column needs no re-solve; columns before it are discarded by a relaxed
    lower bound (each later row takes its cheapest remaining column, reuse
    allowed) or, when the bound cannot exclude them, by one forced solve. With
    a unique optimum this confirms the incumbent without any extra solves.
    """
    n, m = cost.shape
    fixed: dict[int, int] = {}
    base = 0.0
    for r in range(n):
        used = set(fixed.values())
        free_cols = [c for c in range(m) if c not in used]
        later_rows = list(range(r + 1, n))
        if later_rows:
            # Cheapest and runner-up free column per later row, for the bound.
            sub = cost[np.ix_(later_rows, free_cols)]
            order = np.argsort(sub, axis=1)
            min1_col = [free_cols[order[i, 0]] for i in range(len(later_rows))]
            min1 = sub[np.arange(len(later_rows)), order[:, 0]]
            min2 = sub[np.arange(len(later_rows)), order[:, 1]] if len(free_cols) > 1 else min1
        chosen = incumbent[r]
        for c in free_cols:
            if c >= incumbent[r]:
                break
            bound = base + cost[r, c]
            if later_rows:
                bound += sum(min2[i] if min1_col[i] == c else min1[i]
                             for i in range(len(later_rows)))
            if bound > best_total + _TIE_TOL:
                continue
            total, full = _solve_forced(cost, {**fixed, r: c})
            if total <= best_total + _TIE_TOL:
                chosen = c
                incumbent = full
                break
        fixed[r] = chosen
        base += cost[r, chosen]
    return sorted(fixed.items())


def match_pairs(smaller: list[BBox], larger: list[BBox]) -> Assignment:
    """Min-cost injection of smaller into larger under GIoU loss."""
    if not smaller or not larger:
        raise MatchingError("no boxes to match")
    if len(smaller) > len(larger):
        raise MatchingError(f"first list ({len(smaller)}) exceeds second ({len(larger)})")
    cost = _cost_matrix(smaller, larger)
    if len(smaller) == 1:
        # Lexicographic winner is simply the lowest column within tie tolerance.
        best = float(cost[0].min())
        col = int(np.flatnonzero(cost[0] <= best + _TIE_TOL)[0])
        return Assignment(pairs=((0, int(col)),), total_cost=float(cost[0, col]))
    row_ind, col_ind = linear_sum_assignment(cost)
    incumbent = {int(r): int(c) for r, c in zip(row_ind, col_ind)}
    best_total = float(cost[row_ind, col_ind].sum())
    pairs = _lexicographic_refine(cost, incumbent, best_total)
    total = float(sum(cost[r, c] for r, c in pairs))
    return Assignment(pairs=tuple(pairs), total_cost=total)


def _pair_values(ori: np.ndarray, per: np.ndarray, kind: str) -> np.ndarray:
    if kind == "iou":
        return iou_pairwise(ori, per)
    return (giou_pairwise(ori, per) + 1.0) / 2.0


def matched_index_pairs(record: ImageRecord, opts: StabilityOptions) -> tuple[
        list[tuple[int, int]], int, int]:
    """Matched (original_index, perturbed_index) pairs after filtering.

    Returns (pairs, n_ori, n_per) with counts taken after the score filter.
    Indices refer to positions within the filtered lists' source tuples.
    """
    ori_all = list(record.original)
    per_all = list(record.perturbed)
    ori_idx = [i for i, d in enumerate(ori_all) if d.score >= opts.score_threshold]
    per_idx = [j for j, d in enumerate(per_all) if d.score >= opts.score_threshold]
    n_ori, n_per = len(ori_idx), len(per_idx)
    if n_ori == 0 or n_per == 0:
        return [], n_ori, n_per

    groups: list[tuple[list[int], list[int]]]
    if opts.classwise:
        classes = sorted({ori_all[i].class_id for i in ori_idx} |
                         {per_all[j].class_id for j in per_idx})
        groups = [([i for i in ori_idx if ori_all[i].class_id == cls],
                   [j for j in per_idx if per_all[j].class_id == cls])
                  for cls in classes]
    else:
        groups = [(ori_idx, per_idx)]

    pairs: list[tuple[int, int]] = []
    for o_idx, p_idx in groups:
        if not o_idx or not p_idx:
            continue
        o_boxes = [ori_all[i].bbox for i in o_idx]
        p_boxes = [per_all[j].bbox for j in p_idx]
        if len(o_boxes) <= len(p_boxes):
            assignment = match_pairs(o_boxes, p_boxes)
            pairs.extend((o_idx[a], p_idx[b]) for a, b in assignment.pairs)
        else:
            assignment = match_pairs(p_boxes, o_boxes)
            pairs.extend((o_idx[b], p_idx[a]) for a, b in assignment.pairs)
    pairs.sort()
    return pairs, n_ori, n_per


def image_stability(record: ImageRecord, opts: StabilityOptions = StabilityOptions()) -> ImageStability:
    """Per-image box stability: mean pair score over min-cost matched pairs.

    Undefined (stability None) when either pass is empty after filtering;
    that is a value, not an error, and such images count as skipped downstream.
    """
    pairs, n_ori, n_per = matched_index_pairs(record, opts)
    if not pairs:
        return ImageStability(n_ori=n_ori, n_per=n_per, n_matched=0,
                              pair_scores=(), stability=None, matching_loss=None)
    ori = np.array([record.original[i].bbox.as_tuple() for i, _ in pairs])
    per = np.array([record.perturbed[j].bbox.as_tuple() for _, j in pairs])
    scores = _pair_values(ori, per, opts.pair_score)
    losses = 1.0 - giou_pairwise(ori, per)
    stability = float(scores.mean())
    if opts.count_penalty:
        stability *= len(pairs) / max(n_ori, n_per)
    return ImageStability(n_ori=n_ori, n_per=n_per, n_matched=len(pairs),
                          pair_scores=tuple(float(s) for s in scores),
                          stability=stability,
                          matching_loss=float(losses.mean()))


def bos_score(stabilities: list[ImageStability]) -> DatasetScore:
    """Dataset box stability: mean per-image stability over defined images."""
    if not stabilities:
        raise ScoreUndefinedError("empty stability list")
    defined = [s.stability for s in stabilities if s.defined]
    skipped = len(stabilities) - len(defined)
    if not defined:
        raise ScoreUndefinedError("BoS undefined on this set: no image has matched boxes")
    return DatasetScore(kind=ScoreKind.BOS, value=float(np.mean(defined)),
                        valid_images=len(defined), skipped_images=skipped)


def cs_score(records: list[ImageRecord], opts: StabilityOptions = StabilityOptions()) -> DatasetScore:
    """Confidence stability: 1 minus mean per-pair confidence deviation, per image,
    averaged over images with at least one matched pair."""
    if not records:
        raise ScoreUndefinedError("empty record list")
    per_image: list[float] = []
    skipped = 0
    for record in sorted(records, key=lambda r: r.image_id):
        pairs, _, _ = matched_index_pairs(record, opts)
        if not pairs:
            skipped += 1
            continue
        deviations = [abs(record.original[i].score - record.perturbed[j].score)
                      for i, j in pairs]
        per_image.append(1.0 - float(np.mean(deviations)))
    if not per_image:
        raise ScoreUndefinedError("CS undefined on this set: no image has matched boxes")
    return DatasetScore(kind=ScoreKind.CS, value=float(np.mean(per_image)),
                        valid_images=len(per_image), skipped_images=skipped)
