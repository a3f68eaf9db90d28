"""Central finite-difference gradient checking."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor


def numerical_grad(f: Callable[[], float], p: Tensor, h: float = 1e-5) -> np.ndarray:
    grad = np.zeros_like(p.data)
    flat = p.data.reshape(-1)  # view
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = f()
        flat[i] = orig - h
        down = f()
        flat[i] = orig
        gflat[i] = (up - down) / (2 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-12) -> float:
    """``||a - n|| / max(||a||, ||n||)``, zero when both lie below ``floor``."""
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
    if scale < floor:
        return 0.0
    return float(np.linalg.norm(analytic - numeric) / scale)


def check_gradients(loss_fn: Callable[[], Tensor], params: Sequence[Parameter], h: float = 1e-5) -> dict[str, float]:
    """Compare backprop against central differences for each parameter.

    ``loss_fn`` must rebuild the graph from scratch and be deterministic
    (reseed any rng inside it). A gradient whose analytic and numeric norms
    both fall under the difference-quotient noise floor, ``1e-8 * max(1, |L|)``,
    counts as zero: relative error is undefined there.
    """
    for p in params:
        p.grad = None
    loss = loss_fn()
    floor = 1e-8 * max(1.0, abs(loss.item()))
    grads = ad.backward(loss, params)
    analytic = {k: v.copy() for k, v in grads.items()}

    def value() -> float:
        with ad.no_grad():
            return loss_fn().item()

    return {p.id: relative_error(analytic[p.id], numerical_grad(value, p, h), floor) for p in params}
