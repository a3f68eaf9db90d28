"""Monte-Carlo prediction and the aleatoric / epistemic variance split."""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .data.pipeline import LabeledSet
from .errors import AleatoricUnavailableError, ContractError
from .model import DsttModel

DEFAULT_K = 100


@dataclass
class McConfig:
    K: int = DEFAULT_K
    seed: int = 0

    def __post_init__(self):
        if self.K < 2:
            raise ContractError(f"K must be >= 2, got {self.K}")


@dataclass
class McSamples:
    """``means[k, i]`` and ``variances[k, i]`` for pass ``k`` and record ``i``."""

    means: np.ndarray
    variances: np.ndarray | None


@dataclass
class ForecastDistribution:
    mean: np.ndarray
    aleatoric: np.ndarray
    epistemic: np.ndarray
    total: np.ndarray
    time: np.ndarray | None = None
    observed: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.mean)


def pass_rng(seed: int, k: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, k]))


def mc_predict(model: DsttModel, dataset: LabeledSet, cfg: McConfig | None = None, *,
               epistemic_only: bool = False, workers: int = 1) -> McSamples:
    """Run ``K`` stochastic passes with fresh DVL weights and dropout masks each.

    The convolution/recurrent/attention trunk has no stochastic component,
    so it is evaluated once and only the sampled head is repeated. Pass ``k``
    draws from its own generator seeded by ``(cfg.seed, k)``, so the grid does
    not depend on the order in which passes run.
    """
    cfg = cfg or McConfig()
    if not model.trained:
        raise ContractError("model has not been trained")
    has_var = model.config.output_width == 2
    if not has_var and not epistemic_only:
        raise AleatoricUnavailableError(
            "model has no variance head; retrain with heteroscedastic output or pass epistemic_only=True"
        )
    chunks = model.sequences(dataset)
    with ad.no_grad():
        trunks = [(c.start, c.stop, model.trunk(c.features)) for c in chunks]
    m = len(dataset)

    def one_pass(k):
        rng = pass_rng(cfg.seed, k)
        mu_row, var_row = np.empty(m), np.empty(m)
        with ad.no_grad():
            for start, stop, z in trunks:
                mu, logvar, _ = model.head(z, "mc", rng)
                mu_row[start:stop] = mu.data.reshape(-1)
                if has_var:
                    var_row[start:stop] = np.exp(logvar.data.reshape(-1))
        return mu_row, var_row

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            rows = list(pool.map(one_pass, range(cfg.K)))
    else:
        rows = [one_pass(k) for k in range(cfg.K)]
    means = np.stack([r[0] for r in rows])
    variances = np.stack([r[1] for r in rows]) if has_var else None
    return McSamples(means, variances)


def decompose_variance(means: np.ndarray, variances: np.ndarray | None = None) -> ForecastDistribution:
    """Mean of per-pass variances (aleatoric) plus variance of per-pass means (epistemic)."""
    if isinstance(means, McSamples):
        means, variances = means.means, means.variances
    means = np.asarray(means, dtype=np.float64)
    if means.ndim == 1:
        means = means[:, None]
    if means.shape[0] < 2:
        raise ContractError(f"need at least 2 samples, got {means.shape[0]}")
    if variances is None:
        aleatoric = np.zeros(means.shape[1])
    else:
        variances = np.asarray(variances, dtype=np.float64).reshape(means.shape)
        if np.any(variances < 0):
            raise ContractError("per-sample variances must be non-negative")
        aleatoric = variances.mean(axis=0)
    epistemic = means.var(axis=0)
    return ForecastDistribution(means.mean(axis=0), aleatoric, epistemic, aleatoric + epistemic)


def interval_bounds(dist: ForecastDistribution, z: float = 2.0, component: str = "total"):
    if z <= 0:
        raise ContractError(f"band multiplier must be positive, got {z}")
    try:
        var = {"aleatoric": dist.aleatoric, "epistemic": dist.epistemic, "total": dist.total}[component]
    except KeyError:
        raise ContractError(f"unknown variance component {component!r}") from None
    half = z * np.sqrt(var)
    return dist.mean - half, dist.mean + half


def forecast(model: DsttModel, dataset: LabeledSet, cfg: McConfig | None = None, **kw) -> ForecastDistribution:
    """mc_predict + decompose_variance, annotated with timestamps and observed labels."""
    samples = mc_predict(model, dataset, cfg, **kw)
    dist = decompose_variance(samples.means, samples.variances)
    dist.time = dataset.time
    dist.observed = dataset.label
    return dist
