"""SGD with polynomial learning-rate decay, and Adam (used by the PGD attacks)."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .tensor import ShapeError, Tensor


def poly_lr(base_lr: float, iteration: int, max_iter: int, power: float = 0.9) -> float:
    """base_lr * (1 - iteration/max_iter) ** power."""
    if iteration >= max_iter:
        raise ValueError(f"iteration {iteration} >= max_iter {max_iter}")
    return base_lr * (1.0 - iteration / max_iter) ** power


def sgd_poly_step(params: Sequence[Tensor], base_lr: float, iteration: int,
                  max_iter: int, power: float = 0.9):
    """One SGD step at the poly-decayed rate; params without grads are skipped."""
    lr = poly_lr(base_lr, iteration, max_iter, power)
    for p in params:
        if p.grad is None:
            continue
        if p.grad.shape != p.data.shape:
            raise ShapeError(f"grad shape {p.grad.shape} != param shape {p.data.shape}")
        p.data -= lr * p.grad


@dataclass
class AdamState:
    """Moment buffers for one optimized array."""

    shape: tuple
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: np.ndarray = field(init=False)
    v: np.ndarray = field(init=False)

    def __post_init__(self):
        self.m = np.zeros(self.shape, dtype=np.float64)
        self.v = np.zeros(self.shape, dtype=np.float64)


def adam_step(state: AdamState, target: np.ndarray, grad: np.ndarray, ascent: bool = False):
    """Bias-corrected Adam update of `target` in place (ascent adds the step)."""
    if target.shape != state.m.shape or grad.shape != state.m.shape:
        raise ShapeError(
            f"adam shapes disagree: state {state.m.shape}, target {target.shape}, grad {grad.shape}"
        )
    state.t += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * grad * grad
    mhat = state.m / (1.0 - state.beta1 ** state.t)
    vhat = state.v / (1.0 - state.beta2 ** state.t)
    step = state.lr * mhat / (np.sqrt(vhat) + state.eps)
    if ascent:
        target += step
    else:
        target -= step
