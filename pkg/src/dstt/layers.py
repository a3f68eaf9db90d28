"""Network layers: Conv1D, LSTM, multi-head and additive attention, a dense
variational layer, dropout, and plain dense.

Layers take batched sequences ``[B, T, C]``; a bare ``[T, C]`` sequence is also
accepted and returned without the batch axis.
"""
from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .errors import ContractError, DimensionError, EmptySequenceError


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape or (fan_in, fan_out))


def _batched(x):
    x = ad.as_tensor(x)
    if x.ndim == 2:
        return ad.reshape(x, (1,) + x.shape), True
    if x.ndim != 3:
        raise DimensionError(f"expected [T, C] or [B, T, C], got {x.shape}")
    return x, False


def _unbatch(y: Tensor, squeeze: bool) -> Tensor:
    return ad.reshape(y, y.shape[1:]) if squeeze else y


class Layer:
    name = "layer"

    def parameters(self) -> list[Parameter]:
        return [v for v in vars(self).values() if isinstance(v, Parameter)]

    def __repr__(self) -> str:
        return f"{type(self).__name__}({self.name!r})"


class Conv1DLayer(Layer):
    """Kernel-size-1 convolution, i.e. one affine map shared by every timestep."""

    kind = "Conv1D"

    def __init__(self, in_channels: int, filters: int = 32, *, rng, name="conv1d"):
        self.name = name
        self.in_channels = in_channels
        self.filters = filters
        self.kernel = Parameter(f"{name}.kernel", glorot_uniform(rng, in_channels, filters))
        self.bias = Parameter(f"{name}.bias", np.zeros(filters))

    def forward(self, x) -> Tensor:
        x = ad.as_tensor(x)
        if x.shape[-1] != self.in_channels:
            raise DimensionError(f"{self.name}: expected {self.in_channels} channels, got {x.shape[-1]}")
        return ad.linear(x, self.kernel, self.bias)


def lstm_sequence(x: Tensor, w_x: Tensor, w_h: Tensor, b: Tensor) -> Tensor:
    """Run an LSTM over ``x[B, T, C]`` from zero state and return every ``h_t``.

    Gate blocks in the fused weights are ordered input, forget, output,
    candidate. The backward rule is hand-written backpropagation through time.
    """
    B, T, _ = x.shape
    H = w_h.shape[0]
    if T == 0:
        return ad._result(np.zeros((B, 0, H)), (x, w_x, w_h, b), lambda g: (None, None, None, None))
    xw = x.data @ w_x.data + b.data  # [B, T, 4H]
    wh = w_h.data
    gates = np.empty((B, T, 4 * H))
    cells = np.empty((B, T, H))
    hs = np.empty((B, T, H))
    h = np.zeros((B, H))
    c = np.zeros((B, H))
    for t in range(T):
        z = xw[:, t] + h @ wh
        g = gates[:, t]
        g[:, : 3 * H] = ad._np_sigmoid(z[:, : 3 * H])
        g[:, 3 * H :] = np.tanh(z[:, 3 * H :])
        c = g[:, H : 2 * H] * c + g[:, :H] * g[:, 3 * H :]
        h = g[:, 2 * H : 3 * H] * np.tanh(c)
        cells[:, t] = c
        hs[:, t] = h

    def bw(dh_all):
        dz_all = np.empty_like(gates)
        dh_next = np.zeros((B, H))
        dc_next = np.zeros((B, H))
        for t in range(T - 1, -1, -1):
            g = gates[:, t]
            i, f, o, cand = g[:, :H], g[:, H : 2 * H], g[:, 2 * H : 3 * H], g[:, 3 * H :]
            tc = np.tanh(cells[:, t])
            c_prev = cells[:, t - 1] if t > 0 else 0.0
            dh = dh_all[:, t] + dh_next
            dc = dc_next + dh * o * (1.0 - tc * tc)
            dz = dz_all[:, t]
            dz[:, :H] = dc * cand * i * (1.0 - i)
            dz[:, H : 2 * H] = dc * c_prev * f * (1.0 - f)
            dz[:, 2 * H : 3 * H] = dh * tc * o * (1.0 - o)
            dz[:, 3 * H :] = dc * i * (1.0 - cand * cand)
            dc_next = dc * f
            dh_next = dz @ wh.T
        dz2 = dz_all.reshape(B * T, 4 * H)
        h_prev = np.concatenate([np.zeros((B, 1, H)), hs[:, :-1]], axis=1).reshape(B * T, H)
        dx = dz_all @ w_x.data.T
        dwx = x.data.reshape(B * T, -1).T @ dz2
        dwh = h_prev.T @ dz2
        return dx, dwx, dwh, dz2.sum(axis=0)

    return ad._result(hs, (x, w_x, w_h, b), bw)


class LSTMLayer(Layer):
    kind = "LSTM"

    def __init__(self, input_size: int, hidden_size: int = 250, *, rng, name="lstm"):
        self.name = name
        self.input_size = input_size
        self.hidden_size = hidden_size
        H = hidden_size
        self.w_x = Parameter(f"{name}.w_x", glorot_uniform(rng, input_size, 4 * H))
        self.w_h = Parameter(f"{name}.w_h", glorot_uniform(rng, H, 4 * H))
        bias = np.zeros(4 * H)
        bias[H : 2 * H] = 1.0  # forget gate
        self.bias = Parameter(f"{name}.bias", bias)

    def gate_weights(self) -> dict[str, tuple[np.ndarray, np.ndarray, np.ndarray]]:
        """Per-gate views ``(W_input, W_hidden, bias)`` keyed i, f, o, c."""
        H = self.hidden_size
        return {
            k: (self.w_x.data[:, j * H : (j + 1) * H], self.w_h.data[:, j * H : (j + 1) * H], self.bias.data[j * H : (j + 1) * H])
            for j, k in enumerate("ifoc")
        }

    def forward(self, x) -> Tensor:
        x, squeeze = _batched(x)
        if x.shape[-1] != self.input_size:
            raise DimensionError(f"{self.name}: expected {self.input_size} features, got {x.shape[-1]}")
        return _unbatch(lstm_sequence(x, self.w_x, self.w_h, self.bias), squeeze)


class MultiHeadAttentionLayer(Layer):
    """Unmasked scaled dot-product self-attention with ``num_heads`` heads.

    Inputs pass through a learned affine projection to ``model_dim`` first
    (``project=False`` skips it when the widths already agree); the
    concatenated heads are projected back to ``model_dim``. With
    ``residual=True`` the projected input is added to the output.
    """

    kind = "MHA"

    def __init__(self, in_dim: int, model_dim: int = 32, num_heads: int = 3, head_size: int = 3,
                 *, residual: bool = False, project: bool = True, rng, name="mha"):
        self.name = name
        self.in_dim = in_dim
        self.model_dim = model_dim
        self.num_heads = num_heads
        self.head_size = head_size
        self.residual = residual
        hd = num_heads * head_size
        if not project and in_dim != model_dim:
            raise DimensionError(f"{name}: input width {in_dim} needs a projection to {model_dim}")
        if project:
            self.w_in = Parameter(f"{name}.w_in", glorot_uniform(rng, in_dim, model_dim))
            self.b_in = Parameter(f"{name}.b_in", np.zeros(model_dim))
        else:
            self.w_in = self.b_in = None
        self.w_q = Parameter(f"{name}.w_q", glorot_uniform(rng, model_dim, hd))
        self.b_q = Parameter(f"{name}.b_q", np.zeros(hd))
        self.w_k = Parameter(f"{name}.w_k", glorot_uniform(rng, model_dim, hd))
        self.b_k = Parameter(f"{name}.b_k", np.zeros(hd))
        self.w_v = Parameter(f"{name}.w_v", glorot_uniform(rng, model_dim, hd))
        self.b_v = Parameter(f"{name}.b_v", np.zeros(hd))
        self.w_o = Parameter(f"{name}.w_o", glorot_uniform(rng, hd, model_dim))
        self.b_o = Parameter(f"{name}.b_o", np.zeros(model_dim))
        self.last_weights: np.ndarray | None = None

    def _heads(self, u: Tensor, w, b) -> Tensor:
        B, T, _ = u.shape
        h, d = self.num_heads, self.head_size
        p = ad.reshape(ad.linear(u, w, b), (B, T, h, d))
        return ad.reshape(ad.transpose(p, (0, 2, 1, 3)), (B * h, T, d))

    def forward(self, x) -> Tensor:
        x, squeeze = _batched(x)
        if x.shape[-1] != self.in_dim:
            raise DimensionError(f"{self.name}: expected width {self.in_dim}, got {x.shape[-1]}")
        B, T, _ = x.shape
        h, d = self.num_heads, self.head_size
        u = ad.linear(x, self.w_in, self.b_in) if self.w_in is not None else x
        q = self._heads(u, self.w_q, self.b_q)
        k = self._heads(u, self.w_k, self.b_k)
        v = self._heads(u, self.w_v, self.b_v)
        scores = ad.bmm(q, ad.transpose(k, (0, 2, 1))) * (1.0 / math.sqrt(d))
        att = ad.softmax(scores, axis=-1)
        self.last_weights = att.data.reshape(B, h, T, T)
        ctx = ad.reshape(ad.transpose(ad.reshape(ad.bmm(att, v), (B, h, T, d)), (0, 2, 1, 3)), (B, T, h * d))
        out = ad.linear(ctx, self.w_o, self.b_o)
        if self.residual:
            out = out + u
        return _unbatch(out, squeeze)


class CustomAttention(Layer):
    """Additive attention that collapses a sequence to one context vector.

    ``e_t = v . tanh(x_t W + b)``, ``alpha = softmax(e)``, ``out = sum_t alpha_t x_t``.
    """

    kind = "CustomAttn"

    def __init__(self, width: int, *, rng, name="custom_attention"):
        self.name = name
        self.width = width
        self.w = Parameter(f"{name}.w", glorot_uniform(rng, width, width))
        self.b = Parameter(f"{name}.b", np.zeros(width))
        self.v = Parameter(f"{name}.v", glorot_uniform(rng, width, 1))
        self.last_weights: np.ndarray | None = None

    def scores(self, x: Tensor) -> Tensor:
        e = ad.linear(ad.tanh(ad.linear(x, self.w, self.b)), self.v)
        return ad.reshape(e, e.shape[:-1])

    def forward(self, x) -> Tensor:
        x, squeeze = _batched(x)
        B, T, C = x.shape
        if T == 0:
            raise EmptySequenceError(f"{self.name}: cannot attend over an empty sequence")
        if C != self.width:
            raise DimensionError(f"{self.name}: expected width {self.width}, got {C}")
        alpha = ad.softmax(self.scores(x), axis=-1)
        self.last_weights = alpha.data
        ctx = ad.bmm(ad.reshape(alpha, (B, 1, T)), x)
        ctx = ad.reshape(ctx, (B, C))
        return ad.reshape(ctx, (C,)) if squeeze else ctx


class DenseVariationalLayer(Layer):
    """Affine layer with a mean-field Gaussian posterior over its weights.

    The prior is a fixed standard normal per weight, so the KL term has the
    closed form ``sum(-log sigma + (sigma^2 + mu^2 - 1) / 2)``.
    """

    kind = "DVL"

    def __init__(self, in_dim: int, units: int = 10, *, rho_init: float = -5.0, rng, name="dvl"):
        self.name = name
        self.in_dim = in_dim
        self.units = units
        self.mu_w = Parameter(f"{name}.mu_w", glorot_uniform(rng, in_dim, units))
        self.rho_w = Parameter(f"{name}.rho_w", np.full((in_dim, units), rho_init))
        self.mu_b = Parameter(f"{name}.mu_b", np.zeros(units))
        self.rho_b = Parameter(f"{name}.rho_b", np.full(units, rho_init))

    def kl(self) -> Tensor:
        total = None
        for mu, rho in ((self.mu_w, self.rho_w), (self.mu_b, self.rho_b)):
            sigma = ad.softplus(rho)
            term = ad.tsum(ad.neg(ad.log(sigma)) + 0.5 * (ad.square(sigma) + ad.square(mu) - 1.0))
            total = term if total is None else total + term
        return total

    def forward(self, x, rng: np.random.Generator | None = None, *, sample: bool = True, with_kl: bool = True):
        x = ad.as_tensor(x)
        if x.shape[-1] != self.in_dim:
            raise DimensionError(f"{self.name}: expected width {self.in_dim}, got {x.shape[-1]}")
        if sample:
            if rng is None:
                raise ContractError(f"{self.name}: sampling requires an rng")
            w = ad.gaussian_reparam_sample(self.mu_w, self.rho_w, rng)
            b = ad.gaussian_reparam_sample(self.mu_b, self.rho_b, rng)
        else:
            w, b = self.mu_w, self.mu_b
        out = ad.linear(x, w, b)
        return out, (self.kl() if with_kl else Tensor(0.0))


class DropoutLayer(Layer):
    """Inverted dropout; the identity whenever ``active`` is false or rate is 0."""

    kind = "Dropout"

    def __init__(self, rate: float = 0.2, name="dropout"):
        if not 0.0 <= rate < 1.0:
            raise ContractError(f"dropout rate must lie in [0, 1), got {rate}")
        self.name = name
        self.rate = rate

    def apply(self, x, rng: np.random.Generator | None, active: bool) -> Tensor:
        if not active or self.rate == 0.0:
            return x
        keep = rng.random(ad.as_tensor(x).shape) >= self.rate
        return ad.mul(x, Tensor(keep / (1.0 - self.rate)))


_ACTIVATIONS = {None: None, "linear": None, "relu": ad.relu, "tanh": ad.tanh, "sigmoid": ad.sigmoid}


class DenseLayer(Layer):
    kind = "Dense"

    def __init__(self, in_dim: int, units: int, activation: str | None = None, *, rng, name="dense"):
        if activation not in _ACTIVATIONS:
            raise ContractError(f"unknown activation {activation!r}")
        self.name = name
        self.in_dim = in_dim
        self.units = units
        self.activation = activation
        self.weight = Parameter(f"{name}.weight", glorot_uniform(rng, in_dim, units))
        self.bias = Parameter(f"{name}.bias", np.zeros(units))

    def forward(self, x) -> Tensor:
        out = ad.linear(x, self.weight, self.bias)
        act = _ACTIVATIONS[self.activation]
        return act(out) if act else out
