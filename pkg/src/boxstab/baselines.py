"""Dataset-level comparison measures adapted to detection output.

Confidence-based measures pool retained boxes across the whole set and report
a fraction or mean; the Fréchet distance compares pooled backbone-feature
statistics between a reference (training) dump and a test dump. Thresholded
measures learn their cutoff on a training meta-set by maximizing R² against
mAP.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass

import numpy as np

from .dumps import ImageRecord
from .errors import RegressionError, ScoreUndefinedError, ValidationError
from .matching import DatasetScore, ScoreKind

__all__ = [
    "DEFAULT_TAU",
    "GaussianStats",
    "confidence_measure",
    "learn_threshold",
    "gaussian_stats",
    "stats_from_records",
    "fd_score",
    "save_gaussian_stats",
    "load_gaussian_stats",
]

DEFAULT_TAU = {ScoreKind.PS: 0.95, ScoreKind.ATC: 0.4, ScoreKind.ES: 0.3}

_EIG_CLAMP = 1e-8
_SYM_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class GaussianStats:
    """Sample mean and unbiased covariance of pooled feature vectors."""

    mean: np.ndarray
    covariance: np.ndarray
    count: int

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64)
        cov = np.asarray(self.covariance, dtype=np.float64)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "covariance", cov)
        if mean.ndim != 1:
            raise ValidationError("mean must be a vector", field="mean")
        if cov.shape != (mean.size, mean.size):
            raise ValidationError(
                f"covariance shape {cov.shape} does not match dimension {mean.size}",
                field="covariance")
        if not np.allclose(cov, cov.T, atol=_SYM_TOL, rtol=0.0):
            raise ValidationError("covariance not symmetric within 1e-9", field="covariance")
        if self.count < 2:
            raise ValidationError("count must be at least 2", field="count")

    @property
    def dim(self) -> int:
        return int(self.mean.size)


def _normalized_entropy(probs: tuple[float, ...]) -> float:
    k = len(probs)
    if k == 1:
        return 0.0
    h = -sum(p * math.log(p) for p in probs if p > 0.0)
    return h / math.log(k)


def _kind(kind) -> ScoreKind:
    if isinstance(kind, ScoreKind):
        return kind
    return ScoreKind(str(kind).lower())


def confidence_measure(records: list[ImageRecord], kind, tau: float | None = None,
                       score_threshold: float = 0.3, per_image: bool = False) -> DatasetScore:
    """PS / ES / AC / ATC over retained original-pass boxes.

    PS and ATC: fraction of boxes with score >= tau. AC: mean score, tau
    ignored. ES: fraction of boxes whose normalized entropy H(probs)/log K is
    at most tau. Boxes below score_threshold are dropped first (keep this equal
    to the stability run's threshold so measures see the same population).
    per_image averages an image-level value instead of pooling boxes.
    """
    measure = _kind(kind)
    if measure not in (ScoreKind.PS, ScoreKind.ES, ScoreKind.AC, ScoreKind.ATC):
        raise ValidationError(f"{measure.value} is not a confidence measure", field="kind")
    if tau is None:
        tau = DEFAULT_TAU.get(measure)
    if measure is not ScoreKind.AC and not 0.0 <= tau <= 1.0:
        raise ValidationError("tau must lie in [0, 1]", field="tau")

    def box_value(det) -> float:
        if measure is ScoreKind.AC:
            return det.score
        if measure in (ScoreKind.PS, ScoreKind.ATC):
            return 1.0 if det.score >= tau else 0.0
        if det.probs is None:
            raise ValidationError("ES requires per-box probs", field="probs")
        return 1.0 if _normalized_entropy(det.probs) <= tau else 0.0

    pooled: list[float] = []
    per_image_values: list[float] = []
    valid = 0
    for rec in sorted(records, key=lambda r: r.image_id):
        vals = [box_value(d) for d in rec.original if d.score >= score_threshold]
        if not vals:
            continue
        valid += 1
        pooled.extend(vals)
        per_image_values.append(float(np.mean(vals)))
    if not pooled:
        raise ScoreUndefinedError(f"{measure.value} measure undefined: no retained boxes")
    value = float(np.mean(per_image_values if per_image else pooled))
    return DatasetScore(kind=measure, value=value, valid_images=valid,
                        skipped_images=len(records) - valid)


def _simple_r2(x: np.ndarray, y: np.ndarray) -> float:
    design = np.stack([x, np.ones_like(x)], axis=1)
    coef, _, _, _ = np.linalg.lstsq(design, y, rcond=None)
    residual = y - design @ coef
    ss_res = float(residual @ residual)
    ss_tot = float(((y - y.mean()) ** 2).sum())
    if ss_tot <= 0.0:
        return 1.0 if ss_res <= 1e-24 else 0.0
    return 1.0 - ss_res / ss_tot


def learn_threshold(candidates: list[float],
                    training_samples: dict[float, list[tuple[float, float]]]) -> float:
    """Pick the cutoff whose measure values best explain mAP on a training meta-set.

    training_samples maps each candidate to (measure value at that candidate,
    mAP) pairs; the winner maximizes simple-regression R², ties going to the
    smallest candidate.
    """
    if not candidates:
        raise RegressionError("no threshold candidates")
    best_tau = None
    best_r2 = -math.inf
    for tau in sorted(candidates):
        samples = training_samples.get(tau)
        if samples is None or len(samples) < 2:
            raise RegressionError(f"candidate {tau!r} needs at least 2 training samples")
        x = np.array([s for s, _ in samples], dtype=np.float64)
        y = np.array([m for _, m in samples], dtype=np.float64)
        r2 = _simple_r2(x, y)
        if r2 > best_r2:
            best_r2 = r2
            best_tau = tau
    return best_tau


def gaussian_stats(features: list) -> GaussianStats:
    """Sample mean and unbiased (n-1) covariance of equal-length vectors."""
    if len(features) < 2:
        raise ScoreUndefinedError("need at least 2 feature vectors")
    dims = {len(f) for f in features}
    if len(dims) != 1:
        raise ValidationError(f"feature dimensions differ: {sorted(dims)}", field="feature")
    arr = np.array(features, dtype=np.float64)
    mean = arr.mean(axis=0)
    cov = np.atleast_2d(np.cov(arr, rowvar=False, ddof=1))
    return GaussianStats(mean=mean, covariance=cov, count=arr.shape[0])


def stats_from_records(records: list[ImageRecord]) -> GaussianStats:
    """Pool per-image feature vectors (images without one are skipped)."""
    feats = [rec.feature for rec in sorted(records, key=lambda r: r.image_id)
             if rec.feature is not None]
    if len(feats) < 2:
        raise ScoreUndefinedError("need at least 2 images with feature vectors")
    return gaussian_stats(feats)


def _psd_sqrt(matrix: np.ndarray, where: str) -> np.ndarray:
    vals, vecs = np.linalg.eigh(matrix)
    if vals.min(initial=0.0) < -_EIG_CLAMP:
        raise ValidationError(f"{where} not positive semi-definite "
                              f"(eigenvalue {vals.min():.3e})", field="covariance")
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def fd_score(test: GaussianStats, reference: GaussianStats) -> float:
    """Fréchet distance between two Gaussian summaries.

    ||mu1 - mu2||^2 + Tr(S1 + S2 - 2 (S1 S2)^(1/2)), the cross square root
    taken of the symmetrized product sqrt(S1) S2 sqrt(S1). Eigenvalues no more
    negative than 1e-8 are clamped to zero; anything worse raises.
    """
    if test.dim != reference.dim:
        raise ValidationError(f"dimension mismatch: {test.dim} vs {reference.dim}",
                              field="feature")
    diff = test.mean - reference.mean
    root1 = _psd_sqrt(test.covariance, "test covariance")
    inner = root1 @ reference.covariance @ root1
    inner = (inner + inner.T) / 2.0
    vals = np.linalg.eigvalsh(inner)
    if vals.min(initial=0.0) < -_EIG_CLAMP:
        raise ValidationError("covariance product not positive semi-definite "
                              f"(eigenvalue {vals.min():.3e})", field="covariance")
    vals = np.clip(vals, 0.0, None)
    trace_term = float(np.trace(test.covariance) + np.trace(reference.covariance)
                       - 2.0 * np.sqrt(vals).sum())
    return max(0.0, float(diff @ diff) + trace_term)


def save_gaussian_stats(stats: GaussianStats, path: str | os.PathLike) -> None:
    obj = {
        "dimension": stats.dim,
        "mean": stats.mean.tolist(),
        "covariance": stats.covariance.tolist(),
        "count": stats.count,
    }
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(obj, fh, ensure_ascii=False, indent=2)
        fh.write("\n")


def load_gaussian_stats(path: str | os.PathLike) -> GaussianStats:
    with open(path, "r", encoding="utf-8") as fh:
        obj = json.load(fh)
    try:
        stats = GaussianStats(mean=np.array(obj["mean"], dtype=np.float64),
                              covariance=np.array(obj["covariance"], dtype=np.float64),
                              count=int(obj["count"]))
    except (KeyError, TypeError) as err:
        raise ValidationError(f"malformed stats file: {err}", field="stats") from None
    if "dimension" in obj and int(obj["dimension"]) != stats.dim:
        raise ValidationError("declared dimension does not match mean length",
                              field="dimension")
    return stats
