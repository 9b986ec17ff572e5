"""Independent reference implementations used to certify the package.

Everything here is deliberately written the slow, obvious way (exhaustive
enumeration, naive loops, closed-form linear algebra) and shares no code
with boxstab itself.
"""

import itertools

import numpy as np

_PERM_TABLES: dict = {}


def brute_force_match(cost):
    """Minimum-cost injection of rows into columns by full enumeration.

    Returns (pairs, total) where pairs is the lexicographically smallest
    column tuple among all minimizers (rows in natural order).
    """
    cost = np.asarray(cost, dtype=np.float64)
    n, m = cost.shape
    if n > m:
        raise ValueError("rows must not exceed columns")
    # itertools.permutations yields column tuples in lexicographic order, so
    # the first minimizer inside the tie window is the lexicographically
    # smallest one.
    perms = _PERM_TABLES.get((n, m))
    if perms is None:
        perms = np.array(list(itertools.permutations(range(m), n)), dtype=np.intp)
        _PERM_TABLES[(n, m)] = perms
    totals = cost[np.arange(n), perms].sum(axis=1)
    window = totals <= totals.min() + 1e-12
    chosen = int(np.flatnonzero(window)[0])
    pairs = tuple((i, int(j)) for i, j in enumerate(perms[chosen]))
    return pairs, float(totals[chosen])


def _box_iou(a, b):
    ix1 = max(a[0], b[0])
    iy1 = max(a[1], b[1])
    ix2 = min(a[2], b[2])
    iy2 = min(a[3], b[3])
    iw = ix2 - ix1
    ih = iy2 - iy1
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    area_a = (a[2] - a[0]) * (a[3] - a[1])
    area_b = (b[2] - b[0]) * (b[3] - b[1])
    union = area_a + area_b - inter
    if union <= 0:
        return 0.0
    return inter / union


def _interpolated_ap(recalls, precisions):
    """101-point AP by direct scan: max precision at recall >= r, mean over grid."""
    total = 0.0
    for i in range(101):
        r = i / 100.0
        best = 0.0
        for rec, prec in zip(recalls, precisions):
            if rec >= r and prec > best:
                best = prec
        total += best
    return total / 101.0


def exhaustive_map(images, thresholds):
    """Reference COCO-style mAP over plain-python fixtures.

    images: list of (image_id, detections, ground_truths) where each
    detection is (box, score, class_id) and each ground truth (box, class_id).
    Returns {"map_all": float, "ap": {(class_id, thr): float}}.
    """
    classes = sorted({cls for _, _, gts in images for _, cls in gts})
    ap = {}
    for cls in classes:
        dets = []
        for image_id, detections, _ in images:
            for idx, (box, score, det_cls) in enumerate(detections):
                if det_cls == cls:
                    dets.append((score, image_id, idx, box))
        dets.sort(key=lambda d: (-d[0], d[1], d[2]))
        n_gt = sum(1 for _, _, gts in images for _, g_cls in gts if g_cls == cls)
        gt_by_image = {
            image_id: [box for box, g_cls in gts if g_cls == cls]
            for image_id, _, gts in images
        }
        for thr in thresholds:
            used = {image_id: [False] * len(boxes)
                    for image_id, boxes in gt_by_image.items()}
            tp_flags = []
            for score, image_id, idx, box in dets:
                best_iou = 0.0
                best_k = None
                for k, gt_box in enumerate(gt_by_image.get(image_id, [])):
                    if used[image_id][k]:
                        continue
                    value = _box_iou(box, gt_box)
                    if value > best_iou:
                        best_iou, best_k = value, k
                if best_k is not None and best_iou >= thr:
                    used[image_id][best_k] = True
                    tp_flags.append(1)
                else:
                    tp_flags.append(0)
            recalls, precisions = [], []
            tp = 0
            for rank, flag in enumerate(tp_flags, start=1):
                tp += flag
                recalls.append(tp / n_gt if n_gt else 0.0)
                precisions.append(tp / rank)
            ap[(cls, thr)] = _interpolated_ap(recalls, precisions)
    values = list(ap.values())
    return {"map_all": sum(values) / len(values) if values else 0.0, "ap": ap}


def ols_normal_equations(features, targets):
    """Intercept-first least squares weights via the normal equations."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    y = np.asarray(targets, dtype=np.float64)
    design = np.hstack([np.ones((x.shape[0], 1)), x])
    gram = design.T @ design
    return np.linalg.solve(gram, design.T @ y)


def two_pass_mean_cov(vectors):
    """Naive two-pass sample mean and unbiased covariance."""
    vectors = [list(map(float, v)) for v in vectors]
    n = len(vectors)
    d = len(vectors[0])
    mean = [sum(v[k] for v in vectors) / n for k in range(d)]
    cov = [[0.0] * d for _ in range(d)]
    for v in vectors:
        for a in range(d):
            for b in range(d):
                cov[a][b] += (v[a] - mean[a]) * (v[b] - mean[b])
    for a in range(d):
        for b in range(d):
            cov[a][b] /= n - 1
    return np.array(mean), np.array(cov)
