"""Momentum and Adam parameter updates plus the stepped exponential decay."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import ShapeMismatchError


@dataclass
class OptimizerState:
    kind: str
    buffers: dict = field(default_factory=dict)
    step: int = 0


def _rate(lr, name):
    return lr[name] if isinstance(lr, dict) else lr


def _check_shapes(params, grads):
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.data.shape:
            raise ShapeMismatchError(
                f"gradient shape {g.shape} != parameter shape {p.data.shape} for {name!r}"
            )


def momentum_step(params, grads, state: OptimizerState, lr, mu: float = 0.9):
    """v <- mu*v + g; w <- w - lr*v. ``lr`` is a float or per-name dict."""
    _check_shapes(params, grads)
    state.step += 1
    for name, p in params.items():
        v = state.buffers.get(name)
        if v is None:
            v = state.buffers[name] = np.zeros_like(p.data)
        v *= mu
        v += grads[name]
        p.data = p.data - _rate(lr, name) * v


def adam_step(params, grads, state: OptimizerState, lr,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """Bias-corrected first/second moment update."""
    _check_shapes(params, grads)
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in params.items():
        g = grads[name]
        buf = state.buffers.get(name)
        if buf is None:
            buf = state.buffers[name] = {"m": np.zeros_like(p.data), "v": np.zeros_like(p.data)}
        m, v = buf["m"], buf["v"]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.data = p.data - _rate(lr, name) * (m / c1) / (np.sqrt(v / c2) + eps)


def lr_schedule(epoch: int, base_lr: float, decay_factor: float, period: int) -> float:
    """base_lr * decay_factor ** floor(epoch / period)."""
    if epoch < 0:
        raise ValueError("epoch must be nonnegative")
    if period < 1:
        raise ValueError("period must be >= 1")
    if not 0 < decay_factor <= 1:
        raise ValueError("decay_factor must lie in (0, 1]")
    return base_lr * decay_factor ** (epoch // period)
