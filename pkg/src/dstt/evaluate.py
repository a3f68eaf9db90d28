"""Forecast metrics, baselines, storm categories, ablation and cross-validation harnesses."""
from __future__ import annotations

import enum
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from typing import Iterable, Sequence

import numpy as np

from .data.pipeline import DatasetSplit, LabeledSet, fraction_split, kfold_splits, label_records
from .data.tables import SolarWindTable, write_rows
from .errors import ContractError, HorizonRangeError, UndefinedMetricError
from .model import AblationVariant, DsttConfig, build_model, predict_point, train

log = logging.getLogger(__name__)

REPORT_HEADER = ("method", "variant", "w", "seed", "m", "rmse", "r2")


def _pair(observed, predicted) -> tuple[np.ndarray, np.ndarray]:
    y = np.asarray(observed, dtype=np.float64).reshape(-1)
    yhat = np.asarray(predicted, dtype=np.float64).reshape(-1)
    if len(y) != len(yhat):
        raise ContractError(f"length mismatch: {len(y)} observed vs {len(yhat)} predicted")
    if len(y) == 0:
        raise ContractError("no records to score")
    return y, yhat


def rmse(observed, predicted) -> float:
    y, yhat = _pair(observed, predicted)
    return math.sqrt(float(np.mean((y - yhat) ** 2)))


def r_squared(observed, predicted) -> float:
    y, yhat = _pair(observed, predicted)
    if len(y) < 2:
        raise UndefinedMetricError("R^2 needs at least two records")
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    if ss_tot == 0.0:
        raise UndefinedMetricError("R^2 is undefined for a constant observed series")
    return 1.0 - float(np.sum((y - yhat) ** 2)) / ss_tot


@dataclass
class EvaluationReport:
    method: str
    w: int | None
    m: int
    rmse: float
    r2: float
    variant: str = ""
    seed: int | None = None

    def row(self) -> list:
        w = "" if self.w is None else self.w
        seed = "" if self.seed is None else self.seed
        return [self.method, self.variant, w, seed, self.m, repr(self.rmse), repr(self.r2)]


def score(method: str, w: int | None, observed, predicted, *, variant: str = "",
          seed: int | None = None) -> EvaluationReport:
    y, yhat = _pair(observed, predicted)
    try:
        r2 = r_squared(y, yhat)
    except UndefinedMetricError:
        r2 = float("nan")
    return EvaluationReport(method, w, len(y), rmse(y, yhat), r2, variant, seed)


def write_report_csv(reports: Iterable[EvaluationReport], path) -> None:
    with open(path, "w", newline="") as fh:
        write_rows(fh, REPORT_HEADER, (r.row() for r in reports))


class StormCategory(enum.Enum):
    MODERATE = "moderate"
    INTENSE = "intense"
    SUPER = "super"


def classify_storm(dst: float) -> StormCategory:
    """Moderate above -50 nT, intense on [-250, -50], super below -250 nT."""
    if not math.isfinite(dst):
        raise ContractError(f"Dst must be finite, got {dst}")
    if dst > -50.0:
        return StormCategory.MODERATE
    if dst >= -250.0:
        return StormCategory.INTENSE
    return StormCategory.SUPER


# -------------------------------------------------------------------------- baselines


def persistence_forecast(dataset: LabeledSet | np.ndarray, w: int | None = None) -> np.ndarray:
    """Forecast Dst(t + w) as Dst(t).

    Given a labeled set the current Dst column is returned directly. Given a
    raw Dst series, the result aligns with ``series[w:]``.
    """
    if isinstance(dataset, LabeledSet):
        w = dataset.w if w is None else w
        if w < 1:
            raise HorizonRangeError(f"horizon must be >= 1, got {w}")
        return dataset.dst.copy()
    if w is None or w < 1:
        raise HorizonRangeError(f"horizon must be >= 1, got {w}")
    series = np.asarray(dataset, dtype=np.float64)
    return series[:-w].copy()


@dataclass
class LinearModel:
    intercept: float
    weights: np.ndarray
    ridge: bool = False

    def predict(self, features: np.ndarray) -> np.ndarray:
        return np.asarray(features, dtype=np.float64) @ self.weights + self.intercept


RIDGE_LAMBDA = 1e-8


def fit_linear_regression(dataset: LabeledSet | tuple[np.ndarray, np.ndarray]) -> LinearModel:
    """Ordinary least squares through the normal equations.

    Columns are centred and scaled before solving for conditioning. If the
    normal matrix is singular, a ridge term of 1e-8 is added.
    """
    if isinstance(dataset, LabeledSet):
        X, y = dataset.features, dataset.label
    else:
        X, y = dataset
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    m, p = X.shape
    if m < max(p + 1, 8):
        raise ContractError(f"underdetermined: {m} records for {p} features plus intercept")
    mu, sd = X.mean(axis=0), X.std(axis=0)
    sd = np.where(sd > 0, sd, 1.0)
    Z = (X - mu) / sd
    ybar = y.mean()
    A = Z.T @ Z
    rhs = Z.T @ (y - ybar)
    ridge = False
    try:
        if np.linalg.cond(A) > 1e12:
            raise np.linalg.LinAlgError("ill-conditioned")
        coef = np.linalg.solve(A, rhs)
    except np.linalg.LinAlgError:
        ridge = True
        coef = np.linalg.solve(A + RIDGE_LAMBDA * np.eye(p), rhs)
    weights = coef / sd
    return LinearModel(float(ybar - mu @ weights), weights, ridge)


# ------------------------------------------------------------------------ ablation

# reduced widths for desk-scale runs of the full ablation grid
TEST_PROFILE = dict(lstm_units=32, sequence_length=256, epochs=15, learning_rate=3e-3)


def point_config(config: DsttConfig, variant: AblationVariant, seed: int) -> DsttConfig:
    """Copy of ``config`` with uncertainty switched off, for point-forecast comparisons."""
    return replace(config, variant=variant, seed=seed, uq_enabled=False, heteroscedastic=False)


def _run_one(args):
    split, config = args
    t0 = time.perf_counter()
    model = build_model(config)
    train(model, split.train)
    pred = predict_point(model, split.test)
    rep = score(config.variant.label, split.test.w, split.test.label, pred,
                variant=config.variant.name, seed=config.seed)
    log.info("%s w=%d seed=%d rmse=%.3f r2=%.3f (%.1fs)", rep.method, rep.w, config.seed, rep.rmse, rep.r2,
             time.perf_counter() - t0)
    return rep


def baseline_reports(split: DatasetSplit) -> list[EvaluationReport]:
    w = split.test.w
    lr = fit_linear_regression(split.train)
    return [
        score("persistence", w, split.test.label, persistence_forecast(split.test)),
        score("LR", w, split.test.label, lr.predict(split.test.features)),
    ]


@dataclass
class AblationResult:
    reports: list[EvaluationReport]
    baselines: list[EvaluationReport]
    failures: list[tuple[str, int, int, str]]

    def median_rmse(self, method: str, w: int) -> float:
        vals = [r.rmse for r in self.reports if r.method == method and r.w == w]
        return float(np.median(vals)) if vals else float("nan")


def run_ablation_suite(table: SolarWindTable, config: DsttConfig, horizons: Sequence[int] = range(1, 7),
                       seeds: Sequence[int] = (0,), *, train_fraction: float = 0.8, boundary=None,
                       variants: Sequence[AblationVariant] = tuple(AblationVariant),
                       workers: int = 1) -> AblationResult:
    """Train and score every variant x horizon x seed on a chronological split.

    A failing run is logged and recorded in ``failures``; the rest continue.
    """
    from .data.pipeline import chronological_split

    jobs, baselines = [], []
    for w in horizons:
        labeled = label_records(table, w)
        split = chronological_split(labeled, boundary) if boundary is not None else fraction_split(labeled, train_fraction)
        baselines.extend(baseline_reports(split))
        for variant in variants:
            for seed in seeds:
                jobs.append((split, point_config(config, variant, seed)))
    reports, failures = [], []

    def collect(job, outcome):
        split, cfg = job
        if isinstance(outcome, Exception):
            log.error("%s w=%d seed=%d failed: %s", cfg.variant.label, split.test.w, cfg.seed, outcome)
            failures.append((cfg.variant.label, split.test.w, cfg.seed, str(outcome)))
        else:
            reports.append(outcome)

    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            futures = [pool.submit(_run_one, job) for job in jobs]
            for job, fut in zip(jobs, futures):
                try:
                    collect(job, fut.result())
                except Exception as exc:  # noqa: BLE001 - a failed run is recorded, not fatal
                    collect(job, exc)
    else:
        for job in jobs:
            try:
                collect(job, _run_one(job))
            except Exception as exc:  # noqa: BLE001
                collect(job, exc)
    return AblationResult(reports, baselines, failures)


# ---------------------------------------------------------------- cross-validation


@dataclass
class CvResult:
    folds: list[DatasetSplit]
    reports: list[EvaluationReport]

    def summary(self) -> list[dict]:
        out = []
        for method in dict.fromkeys(r.method for r in self.reports):
            rs = [r for r in self.reports if r.method == method]
            rm = np.array([r.rmse for r in rs])
            r2 = np.array([r.r2 for r in rs])
            out.append({"method": method, "w": rs[0].w, "runs": len(rs),
                        "rmse_mean": float(rm.mean()), "rmse_std": float(rm.std()),
                        "r2_mean": float(np.nanmean(r2)), "r2_std": float(np.nanstd(r2))})
        return out


CV_SUMMARY_HEADER = ("method", "w", "runs", "rmse_mean", "rmse_std", "r2_mean", "r2_std")


def cross_validate(labeled: LabeledSet, config: DsttConfig, k: int = 10, *, seed: int = 0) -> CvResult:
    """k-fold, order-preserving CV of DSTT (point mode), LR and persistence."""
    folds = kfold_splits(labeled, k)
    reports = []
    cfg = point_config(config, config.variant, seed)
    for i, split in enumerate(folds):
        model = build_model(cfg)
        train(model, split.train)
        reports.append(score(cfg.variant.label, labeled.w, split.test.label, predict_point(model, split.test),
                             variant=cfg.variant.name, seed=seed))
        reports.extend(baseline_reports(split))
        log.info("cv fold %d/%d done", i + 1, k)
    return CvResult(folds, reports)


def write_cv_summary(result: CvResult, path) -> None:
    rows = ([d[h] if isinstance(d[h], (str, int)) else repr(d[h]) for h in CV_SUMMARY_HEADER] for d in result.summary())
    with open(path, "w", newline="") as fh:
        write_rows(fh, CV_SUMMARY_HEADER, rows)
