"""The Dst Transformer network: assembly, loss, training, point prediction and checkpoints."""
from __future__ import annotations

import enum
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, fields
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .data.pipeline import Chunk, LabeledSet, NormalizationStats, make_sequences, standardize
from .errors import (
    ConfigError,
    ContractError,
    EmptySequenceError,
    NumericDomainError,
    TrainingDivergenceError,
)
from .layers import (
    Conv1DLayer,
    CustomAttention,
    DenseLayer,
    DenseVariationalLayer,
    DropoutLayer,
    LSTMLayer,
    MultiHeadAttentionLayer,
)

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "dstt-checkpoint"
CHECKPOINT_VERSION = 1


class AblationVariant(enum.Enum):
    """Which of Conv1D (C), LSTM (L) and multi-head attention (M) are removed."""

    FULL = ""
    C = "C"
    L = "L"
    M = "M"
    CL = "CL"
    CM = "CM"
    LM = "LM"

    @property
    def removed(self) -> frozenset[str]:
        return frozenset(self.value)

    @property
    def label(self) -> str:
        return "DSTT" if self is AblationVariant.FULL else f"DSTT-{self.value}"

    @classmethod
    def parse(cls, text: str) -> "AblationVariant":
        t = text.strip().upper()
        if t in ("FULL", "DSTT", ""):
            return cls.FULL
        t = t.removeprefix("DSTT-")
        try:
            return cls[t]
        except KeyError:
            raise ConfigError(f"unknown ablation variant {text!r}", field="variant") from None


@dataclass
class DsttConfig:
    sequence_length: int = 1024
    input_features: int = 7
    conv_filters: int = 32
    lstm_units: int = 250
    attention_heads: int = 3
    head_size: int = 3
    attention_width: int = 32
    attention_residual: bool = True
    dvl_units: int = 10
    dvl_rho_init: float = -5.0
    dropout_rate: float = 0.2
    dense_head_units: int = 32
    learning_rate: float = 1e-4
    epochs: int = 100
    batch_size: int = 4
    kl_weight: float | None = None  # None: 1 / number of training records
    heteroscedastic: bool = True
    seed: int = 0
    variant: AblationVariant = AblationVariant.FULL
    uq_enabled: bool = True
    patience: int | None = None

    def __post_init__(self):
        if isinstance(self.variant, str):
            self.variant = AblationVariant.parse(self.variant)
        self.validate()

    def validate(self) -> None:
        positive = ("sequence_length", "input_features", "conv_filters", "lstm_units", "attention_heads",
                    "head_size", "attention_width", "dvl_units", "dense_head_units", "batch_size")
        for name in positive:
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or isinstance(v, bool) or v < 1:
                raise ConfigError(f"{name} must be a positive integer, got {v!r}", field=name)
        if not isinstance(self.epochs, (int, np.integer)) or self.epochs < 0:
            raise ConfigError(f"epochs must be a non-negative integer, got {self.epochs!r}", field="epochs")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}", field="dropout_rate")
        if not (isinstance(self.learning_rate, (int, float)) and self.learning_rate >= 0):
            raise ConfigError(f"learning_rate must be >= 0, got {self.learning_rate!r}", field="learning_rate")
        if self.kl_weight is not None and not self.kl_weight >= 0:
            raise ConfigError(f"kl_weight must be >= 0, got {self.kl_weight}", field="kl_weight")
        if self.patience is not None and self.patience < 1:
            raise ConfigError("patience must be >= 1", field="patience")

    @property
    def output_width(self) -> int:
        return 2 if self.heteroscedastic and self.uq_enabled else 1

    def to_dict(self) -> dict:
        d = asdict(self)
        d["variant"] = self.variant.label
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DsttConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            name = sorted(unknown)[0]
            raise ConfigError(f"unknown config key {name!r}", field=name)
        return cls(**d)


@dataclass
class LossBreakdown:
    mse: float
    kl: float
    kl_weight: float
    nll: float = 0.0
    total: float = 0.0

    def recomputed_total(self) -> float:
        return self.mse + self.kl_weight * self.kl + self.nll


@dataclass
class EpochLog:
    epoch: int
    mse: float
    kl: float
    kl_weight: float
    nll: float
    total: float


class DsttModel:
    """Conv1D -> LSTM -> MHA -> custom attention -> DVL -> dense/dropout head.

    Layers named by the config's ablation variant are skipped. The network
    emits one prediction per timestep; the custom-attention context vector is
    appended to every timestep's features before the variational layer.
    Outputs are mapped to nT with fixed target statistics taken from the
    training labels.
    """

    def __init__(self, config: DsttConfig, rng: np.random.Generator):
        self.config = config
        cfg = config
        removed = cfg.variant.removed
        width = cfg.input_features
        self.conv = self.lstm = self.mha = None
        if "C" not in removed:
            self.conv = Conv1DLayer(width, cfg.conv_filters, rng=rng)
            width = cfg.conv_filters
        if "L" not in removed:
            self.lstm = LSTMLayer(width, cfg.lstm_units, rng=rng)
            width = cfg.lstm_units
        if "M" not in removed:
            self.mha = MultiHeadAttentionLayer(width, cfg.attention_width, cfg.attention_heads, cfg.head_size,
                                               residual=cfg.attention_residual, rng=rng)
            width = cfg.attention_width
        self.custom_attention = CustomAttention(width, rng=rng)
        self.dvl = DenseVariationalLayer(2 * width, cfg.dvl_units, rho_init=cfg.dvl_rho_init, rng=rng)
        self.dense = DenseLayer(cfg.dvl_units, cfg.dense_head_units, "relu", rng=rng, name="dense")
        self.dropout = DropoutLayer(cfg.dropout_rate)
        self.out = DenseLayer(cfg.dense_head_units, cfg.output_width, rng=rng, name="output")
        self.out.kind = "Dense-out"
        self.stats: NormalizationStats | None = None
        self.target_mean = 0.0
        self.target_std = 1.0
        self.history: list[EpochLog] = []
        self.trained = False
        self.meta: dict = {}

    @property
    def layers(self) -> list:
        seq = [self.conv, self.lstm, self.mha, self.custom_attention, self.dvl, self.dense, self.dropout, self.out]
        return [layer for layer in seq if layer is not None]

    def layer_kinds(self) -> list[str]:
        return [layer.kind for layer in self.layers]

    def parameters(self) -> list[Parameter]:
        return [p for layer in self.layers for p in layer.parameters()]

    def named_parameters(self) -> dict[str, Parameter]:
        return {p.id: p for p in self.parameters()}

    # ------------------------------------------------------------------ forward

    def trunk(self, x) -> Tensor:
        """Deterministic part: per-step features joined with the attention context."""
        x = ad.as_tensor(x)
        if x.ndim == 2:
            x = ad.reshape(x, (1,) + x.shape)
        B, T, _ = x.shape
        if T == 0:
            raise EmptySequenceError("model input has no timesteps")
        h = x
        for layer in (self.conv, self.lstm, self.mha):
            if layer is not None:
                h = layer.forward(h)
        W = h.shape[-1]
        ctx = self.custom_attention.forward(h)
        ctx = ad.broadcast_to(ad.reshape(ctx, (B, 1, W)), (B, T, W))
        return ad.concat([h, ctx], axis=-1)

    def head(self, z: Tensor, mode: str, rng: np.random.Generator | None):
        stochastic = mode in ("train", "mc")
        uq = self.config.uq_enabled
        d, kl = self.dvl.forward(z, rng, sample=stochastic and uq, with_kl=uq)
        a = self.dense.forward(d)
        a = self.dropout.apply(a, rng, active=stochastic)
        o = self.out.forward(a)
        mu = ad.getitem(o, (..., 0)) * self.target_std + self.target_mean
        logvar = None
        if self.config.output_width == 2:
            logvar = ad.getitem(o, (..., 1)) + 2.0 * math.log(self.target_std)
        return mu, logvar, kl

    def forward(self, x, mode: str = "eval", rng: np.random.Generator | None = None):
        """Return ``(mean [B, T], logvar [B, T] or None, kl scalar)`` for standardized input."""
        if mode not in ("train", "eval", "mc"):
            raise ContractError(f"mode must be train, eval or mc, got {mode!r}")
        if mode != "eval" and rng is None:
            raise ContractError(f"{mode} mode needs an rng")
        return self.head(self.trunk(x), mode, rng)

    def sequences(self, labeled: LabeledSet) -> list[Chunk]:
        if self.stats is None:
            raise ContractError("model has no normalization statistics; train it first")
        data = labeled if labeled.standardized else standardize(labeled, self.stats)
        return make_sequences(data, self.config.sequence_length)


def build_model(config: DsttConfig, rng: np.random.Generator | None = None) -> DsttModel:
    config.validate()
    if rng is None:
        rng = np.random.default_rng(config.seed)
    return DsttModel(config, rng)


def compute_loss(mu: Tensor, labels, kl: Tensor, kl_weight: float, logvar: Tensor | None = None):
    """MSE on the mean, plus (1/N)-weighted KL, plus a Gaussian NLL for the variance head.

    The NLL sees a detached mean, so the mean is trained by MSE alone.
    Returns ``(total tensor, LossBreakdown)``.
    """
    y = ad.as_tensor(labels)
    if mu.shape != y.shape:
        raise ContractError(f"prediction shape {mu.shape} does not match labels {y.shape}")
    mse = ad.mean(ad.square(mu - y))
    total = mse + ad.mul(kl, kl_weight)
    nll_value = 0.0
    if logvar is not None:
        resid2 = ad.square(ad.detach(mu) - y)
        nll = ad.mean(0.5 * (logvar + resid2 * ad.exp(ad.neg(logvar))))
        total = total + nll
        nll_value = nll.item()
    br = LossBreakdown(mse.item(), kl.item(), kl_weight, nll_value, total.item())
    return total, br


def _batches(chunks: list[Chunk], batch_size: int, order: np.ndarray) -> list[list[Chunk]]:
    buckets: dict[int, list[Chunk]] = {}
    for i in order:
        buckets.setdefault(len(chunks[i].labels), []).append(chunks[i])
    out = []
    for group in buckets.values():
        out.extend(group[j : j + batch_size] for j in range(0, len(group), batch_size))
    return out


def train(model: DsttModel, dataset: LabeledSet, rng: np.random.Generator | None = None,
          *, on_epoch: Callable[[EpochLog], None] | None = None) -> DsttModel:
    """Fit ``model`` with Adam on non-overlapping sequences of ``dataset``.

    Feature statistics and the target mean/std are taken from ``dataset``
    (the training portion). The KL weight defaults to 1 / len(dataset).
    """
    cfg = model.config
    n_train = len(dataset)
    if n_train == 0:
        raise ContractError("training set is empty")
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    model.stats = NormalizationStats.from_features(dataset.features)
    model.target_mean = float(np.mean(dataset.label))
    model.target_std = float(np.std(dataset.label)) or 1.0
    kl_weight = cfg.kl_weight if cfg.kl_weight is not None else 1.0 / n_train
    chunks = make_sequences(standardize(dataset, model.stats), cfg.sequence_length)
    params = model.parameters()
    state = ad.AdamState(learning_rate=cfg.learning_rate)
    model.meta.update({"train_records": n_train, "kl_weight": kl_weight, "w": dataset.w})
    best, stale = math.inf, 0
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(chunks))
        sums = np.zeros(4)  # mse, kl, nll, total
        batches = _batches(chunks, cfg.batch_size, order)
        for batch in batches:
            x = np.stack([c.features for c in batch])
            y = np.stack([c.labels for c in batch])
            try:
                mu, logvar, kl = model.forward(x, "train", rng)
                loss, br = compute_loss(mu, y, kl, kl_weight, logvar)
            except NumericDomainError as exc:
                raise TrainingDivergenceError(f"epoch {epoch}: {exc}", last_good_epoch=epoch - 1) from exc
            if not math.isfinite(br.total):
                raise TrainingDivergenceError(f"epoch {epoch}: loss is {br.total}", last_good_epoch=epoch - 1)
            for p in params:
                p.grad = None
            grads = ad.backward(loss, params)
            try:
                ad.adam_step(params, grads, state)
            except TrainingDivergenceError as exc:
                exc.last_good_epoch = epoch - 1
                raise
            sums += (br.mse, br.kl, br.nll, br.total)
        mse, kl_v, nll, total = sums / max(len(batches), 1)
        entry = EpochLog(epoch, mse, kl_v, kl_weight, nll, total)
        model.history.append(entry)
        log.debug("epoch %d total=%.6g mse=%.6g kl=%.6g nll=%.6g", epoch, total, mse, kl_v, nll)
        if on_epoch is not None:
            on_epoch(entry)
        if cfg.patience is not None:
            if total < best:
                best, stale = total, 0
            else:
                stale += 1
                if stale >= cfg.patience:
                    log.info("stopping after epoch %d: no improvement for %d epochs", epoch, stale)
                    break
    model.trained = True
    return model


def predict_point(model: DsttModel, dataset: LabeledSet) -> np.ndarray:
    """Deterministic forecast (dropout off, posterior-mean weights), one per record."""
    if not model.trained:
        raise ContractError("model has not been trained")
    preds = np.empty(len(dataset))
    with ad.no_grad():
        for chunk in model.sequences(dataset):
            mu, _, _ = model.forward(chunk.features, "eval")
            preds[chunk.start : chunk.stop] = mu.data.reshape(-1)
    return preds


# -------------------------------------------------------------------- checkpoints


def save_checkpoint(model: DsttModel, path: str | os.PathLike) -> None:
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": model.config.to_dict(),
        "trained": model.trained,
        "normalization": model.stats.to_dict() if model.stats is not None else None,
        "target": {"mean": model.target_mean, "std": model.target_std},
        "meta": model.meta,
        "history": [asdict(e) for e in model.history],
        "parameters": [
            {"name": p.id, "shape": list(p.shape), "values": p.data.reshape(-1).tolist()}
            for p in model.parameters()
        ],
    }
    with open(path, "w") as fh:
        json.dump(doc, fh)


def load_checkpoint(path: str | os.PathLike) -> DsttModel:
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ContractError(f"{path} is not a model checkpoint")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ContractError(f"unsupported checkpoint version {doc.get('version')}")
    config = DsttConfig.from_dict(doc["config"])
    model = DsttModel(config, np.random.default_rng(0))
    params = model.named_parameters()
    stored = {p["name"]: p for p in doc["parameters"]}
    if set(stored) != set(params):
        raise ContractError("checkpoint parameters do not match the configured architecture")
    for name, p in params.items():
        entry = stored[name]
        p.data = np.array(entry["values"], dtype=np.float64).reshape(entry["shape"])
    if doc["normalization"] is not None:
        model.stats = NormalizationStats.from_dict(doc["normalization"])
    model.target_mean = doc["target"]["mean"]
    model.target_std = doc["target"]["std"]
    model.meta = doc.get("meta", {})
    model.history = [EpochLog(**e) for e in doc.get("history", [])]
    model.trained = doc["trained"]
    return model
