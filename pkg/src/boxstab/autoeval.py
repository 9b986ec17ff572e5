"""Regression from stability measurements to mAP and the leave-one-out protocol.

A meta-set is a collection of measured sample sets; ordinary least squares maps
measurement vectors to mAP. Leave-one-out holds out every sample set of one
source, fits on the rest, and scores predictions on the held-out source,
repeated when the measurement is stochastic. Also provides the greedy
two-phase search over perturbation configurations.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy import stats as _scipy_stats

from .baselines import confidence_measure, fd_score, stats_from_records
from .dumps import ImageRecord, PerturbConfig
from .errors import RegressionError, ScoreUndefinedError, SearchError
from .matching import (DatasetScore, ScoreKind, StabilityOptions, bos_score,
                       cs_score, image_stability)

__all__ = [
    "MetaSample",
    "LinearModel",
    "EstimateReport",
    "LooRow",
    "LooReport",
    "fit_regressor",
    "predict_map",
    "evaluate_estimates",
    "measure_set",
    "loo_evaluate",
    "table_provider",
    "loo_report_csv",
    "search_perturb_config",
]


@dataclass(frozen=True)
class MetaSample:
    """One measured sample set: feature vector plus its labeled mAP."""

    set_id: str
    source_name: str
    features: tuple[float, ...]
    target_map: float


@dataclass(frozen=True)
class LinearModel:
    """OLS fit; weights[0] is the intercept, weights[1:] the feature slopes."""

    weights: tuple[float, ...]
    feature_kinds: tuple[str, ...]
    r2: float
    rmse: float


@dataclass(frozen=True)
class EstimateReport:
    rmse: float
    r2: float
    spearman_rho: float


@dataclass(frozen=True)
class LooRow:
    """One held-out source: error statistics over repeats (None when skipped)."""

    source_name: str
    truth_map: float | None
    mean_estimate: float | None
    rmse_mean: float | None
    rmse_std: float | None
    n_repeats: int
    skipped: bool


@dataclass(frozen=True)
class LooReport:
    rows: tuple[LooRow, ...]
    overall_rmse: float


def fit_regressor(samples: Sequence[MetaSample],
                  feature_kinds: Sequence[str] | None = None) -> LinearModel:
    """Ordinary least squares mAP = w0 + w . features over a meta-set."""
    if not samples:
        raise RegressionError("no training samples")
    dim = len(samples[0].features)
    if any(len(s.features) != dim for s in samples):
        raise RegressionError("inconsistent feature dimensions in meta-set")
    if dim == 0:
        raise RegressionError("empty feature vectors")
    if len(samples) < dim + 1:
        raise RegressionError(f"need at least {dim + 1} samples for {dim} features, "
                              f"got {len(samples)}")
    x = np.array([s.features for s in samples], dtype=np.float64)
    y = np.array([s.target_map for s in samples], dtype=np.float64)
    if not np.all(np.isfinite(x)) or not np.all(np.isfinite(y)):
        raise RegressionError("non-finite values in meta-set")
    design = np.hstack([np.ones((len(samples), 1)), x])
    if np.linalg.matrix_rank(design) < dim + 1:
        raise RegressionError("rank-deficient design matrix (constant or collinear features)")
    coef, _, _, _ = np.linalg.lstsq(design, y, rcond=None)
    residual = y - design @ coef
    ss_res = float(residual @ residual)
    ss_tot = float(((y - y.mean()) ** 2).sum())
    if ss_tot <= 0.0:
        r2 = 1.0 if ss_res <= 1e-20 else 0.0
    else:
        r2 = 1.0 - ss_res / ss_tot
    kinds = tuple(feature_kinds) if feature_kinds is not None else tuple(
        f"f{i}" for i in range(dim))
    if len(kinds) != dim:
        raise RegressionError("feature_kinds length does not match feature dimension")
    return LinearModel(weights=tuple(float(w) for w in coef), feature_kinds=kinds,
                       r2=r2, rmse=float(np.sqrt(ss_res / len(samples))))


def predict_map(model: LinearModel, features: Sequence[float]) -> float:
    """Apply the linear model and clamp into [0, 1]."""
    if len(features) != len(model.weights) - 1:
        raise RegressionError(f"model expects {len(model.weights) - 1} features, "
                              f"got {len(features)}")
    raw = model.weights[0] + float(np.dot(model.weights[1:], features))
    return min(1.0, max(0.0, raw))


def evaluate_estimates(estimates: Sequence[float], truths: Sequence[float]) -> EstimateReport:
    """RMSE, coefficient of determination, and Spearman rho of estimates vs truths."""
    if len(estimates) != len(truths):
        raise RegressionError("estimates and truths differ in length")
    if len(estimates) < 2:
        raise RegressionError("need at least 2 points")
    est = np.array(estimates, dtype=np.float64)
    tru = np.array(truths, dtype=np.float64)
    rmse = float(np.sqrt(np.mean((est - tru) ** 2)))
    ss_res = float(((tru - est) ** 2).sum())
    ss_tot = float(((tru - tru.mean()) ** 2).sum())
    if ss_tot <= 0.0:
        r2 = 1.0 if ss_res <= 1e-20 else 0.0
    else:
        r2 = 1.0 - ss_res / ss_tot
    if np.ptp(est) == 0.0 or np.ptp(tru) == 0.0:
        # Ranks are degenerate; call agreement perfect only when the values are.
        rho = 1.0 if rmse == 0.0 else float("nan")
    else:
        rho = float(_scipy_stats.spearmanr(est, tru).statistic)
    return EstimateReport(rmse=rmse, r2=r2, spearman_rho=rho)


def measure_set(records: list[ImageRecord], kind, opts: StabilityOptions | None = None,
                tau: float | None = None, reference_stats=None) -> DatasetScore:
    """Compute one dataset-level measurement over a sample set's records.

    Dispatches on kind; FD additionally needs reference GaussianStats.
    """
    opts = opts or StabilityOptions()
    measure = kind if isinstance(kind, ScoreKind) else ScoreKind(str(kind).lower())
    ordered = sorted(records, key=lambda r: r.image_id)
    if measure is ScoreKind.BOS:
        return bos_score([image_stability(r, opts) for r in ordered])
    if measure is ScoreKind.CS:
        return cs_score(ordered, opts)
    if measure is ScoreKind.FD:
        if reference_stats is None:
            raise ScoreUndefinedError("FD needs reference feature statistics")
        test = stats_from_records(ordered)
        value = fd_score(test, reference_stats)
        return DatasetScore(kind=ScoreKind.FD, value=value,
                            valid_images=test.count,
                            skipped_images=len(records) - test.count)
    return confidence_measure(ordered, measure, tau=tau,
                              score_threshold=opts.score_threshold)


# A provider realizes one measurement of the whole meta-set: given a repeat
# index and the test-image cap it returns (training samples, test samples per
# source). Stochastic measurements vary with the repeat index.
MetaProvider = Callable[[int, int | None],
                        tuple[list[MetaSample], Mapping[str, Sequence[MetaSample]]]]


def table_provider(samples: Sequence[MetaSample]) -> MetaProvider:
    """Provider over already-measured samples: each source is tested on its own sets.

    Deterministic, so repeats beyond the first add nothing.
    """
    frozen = list(samples)

    def provider(repeat: int, test_cap: int | None):
        by_source: dict[str, list[MetaSample]] = {}
        for s in frozen:
            by_source.setdefault(s.source_name, []).append(s)
        return frozen, by_source

    return provider


def loo_evaluate(provider: MetaProvider, repeats: int = 10,
                 test_cap: int | None = 5000) -> LooReport:
    """Leave-one-source-out evaluation of the measurement realized by provider.

    Per repeat and held-out source: fit on every other source's samples,
    predict the held-out source's test samples, and record the fold RMSE.
    Rows aggregate mean and std over repeats; a source whose measurement is
    undefined in every repeat is marked skipped rather than given a number.
    """
    if repeats < 1:
        raise RegressionError("repeats must be at least 1")
    per_source_rmse: dict[str, list[float]] = {}
    per_source_truth: dict[str, list[float]] = {}
    per_source_est: dict[str, list[float]] = {}
    sources: list[str] = []

    for repeat in range(repeats):
        samples, test_points = provider(repeat, test_cap)
        if repeat == 0:
            sources = sorted(set(test_points) | {s.source_name for s in samples})
            if len(sources) < 2:
                raise RegressionError("leave-one-out needs at least 2 sources")
        for held_out in sources:
            tests = list(test_points.get(held_out) or [])
            tests = [t for t in tests if all(math.isfinite(f) for f in t.features)]
            if not tests:
                continue
            train = [s for s in samples if s.source_name != held_out]
            if any(s.source_name == held_out for s in train):
                raise RegressionError(f"training pool leaked source {held_out!r}")
            test_ids = {t.set_id for t in tests}
            leaked = sorted(test_ids & {s.set_id for s in train})
            if leaked:
                raise RegressionError(f"test sets {leaked} present in training pool")
            model = fit_regressor(train)
            errs = []
            for t in tests:
                est = predict_map(model, t.features)
                errs.append(est - t.target_map)
                per_source_truth.setdefault(held_out, []).append(t.target_map)
                per_source_est.setdefault(held_out, []).append(est)
            fold_rmse = float(np.sqrt(np.mean(np.array(errs) ** 2)))
            per_source_rmse.setdefault(held_out, []).append(fold_rmse)

    rows = []
    defined_means = []
    for name in sources:
        fold = per_source_rmse.get(name, [])
        if not fold:
            rows.append(LooRow(source_name=name, truth_map=None, mean_estimate=None,
                               rmse_mean=None, rmse_std=None, n_repeats=0, skipped=True))
            continue
        mean = float(np.mean(fold))
        std = float(np.std(fold))
        defined_means.append(mean)
        rows.append(LooRow(source_name=name,
                           truth_map=float(np.mean(per_source_truth[name])),
                           mean_estimate=float(np.mean(per_source_est[name])),
                           rmse_mean=mean, rmse_std=std,
                           n_repeats=len(fold), skipped=False))
    if not defined_means:
        raise RegressionError("every source was skipped; nothing to report")
    return LooReport(rows=tuple(rows), overall_rmse=float(np.mean(defined_means)))


def loo_report_csv(report: LooReport) -> str:
    """Table layout: one column per held-out source plus the average."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    names = [row.source_name for row in report.rows]
    writer.writerow(["held_out", *names, "average"])

    def cells(get) -> list[str]:
        out = []
        for row in report.rows:
            value = get(row)
            out.append("" if value is None else repr(value))
        return out

    writer.writerow(["rmse_mean", *cells(lambda r: r.rmse_mean), repr(report.overall_rmse)])
    writer.writerow(["rmse_std", *cells(lambda r: r.rmse_std), ""])
    writer.writerow(["truth_map", *cells(lambda r: r.truth_map), ""])
    writer.writerow(["mean_estimate", *cells(lambda r: r.mean_estimate), ""])
    writer.writerow(["n_repeats", *[str(r.n_repeats) for r in report.rows], ""])
    return buf.getvalue()


def search_perturb_config(candidates: Sequence[PerturbConfig],
                          scorer: Callable[[PerturbConfig], float]) -> PerturbConfig:
    """Greedy two-phase pick of a perturbation setting by training R².

    Phase one sweeps the rate (candidates sharing the first candidate's
    positions, ascending rate); phase two sweeps positions at the best rate.
    Scorer exceptions and NaN results drop a candidate; the best scored
    candidate overall wins, earliest evaluation winning ties.
    """
    if not candidates:
        raise SearchError("no perturbation candidates")
    results: dict[PerturbConfig, float | None] = {}

    def score(config: PerturbConfig) -> None:
        if config in results:
            return
        try:
            value = float(scorer(config))
        except Exception:
            results[config] = None
            return
        results[config] = None if math.isnan(value) else value

    base_positions = candidates[0].positions
    phase1 = sorted((c for c in candidates if c.positions == base_positions),
                    key=lambda c: c.rate)
    order: list[PerturbConfig] = []
    for config in phase1:
        score(config)
        order.append(config)
    scored1 = [c for c in phase1 if results[c] is not None]
    if scored1:
        best_rate = max(scored1, key=lambda c: results[c]).rate
        phase2 = [c for c in candidates if c.rate == best_rate]
    else:
        # Rate sweep produced nothing usable; fall back to scoring everything.
        phase2 = list(candidates)
    for config in phase2:
        score(config)
        if config not in order:
            order.append(config)

    best = None
    for config in order:
        value = results[config]
        if value is None:
            continue
        if best is None or value > results[best]:
            best = config
    if best is None:
        raise SearchError("scorer failed on every candidate")
    return best
