"""Adam and the two learning-rate schedules."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

BETA1 = 0.9
BETA2 = 0.999
EPS = 1e-8
LOG_FLOOR_LR = 3e-4


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    def copy(self) -> "AdamState":
        return AdamState({k: a.copy() for k, a in self.m.items()},
                         {k: a.copy() for k, a in self.v.items()}, self.step)


def adam_step(params: dict[str, np.ndarray], grads, state: AdamState, lr: float) -> AdamState:
    """One in-place Adam update of ``params`` (PyTorch defaults, no weight decay).

    ``grads`` is a mapping (or :class:`~factorlab.nn.Gradients`) with an entry
    for every key of ``params``.  Raises before touching anything if a
    gradient is not finite.
    """
    if lr < 0:
        raise ValueError("learning rate must be >= 0")
    g = grads.tensors if hasattr(grads, "tensors") else grads
    for name in params:
        if not np.isfinite(g[name]).all():
            raise FloatingPointError(f"non-finite gradient for '{name}'")
    state.step += 1
    bc1 = 1.0 - BETA1**state.step
    bc2 = 1.0 - BETA2**state.step
    step_size = lr / bc1
    sqrt_bc2 = math.sqrt(bc2)
    for name, p in params.items():
        grad = g[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= BETA1
        m += (1.0 - BETA1) * grad
        v *= BETA2
        v += (1.0 - BETA2) * grad * grad
        p -= step_size * m / (np.sqrt(v) / sqrt_bc2 + EPS)
    return state


def cosine_weight(t: float, T: float) -> float:
    if T <= 0:
        return 1.0
    return (math.cos(math.pi * t / T) + 1.0) / 2.0


def cosine_lr(t: float, T: float, eta: float) -> float:
    """``eta * (cos(pi t / T) + 1) / 2``."""
    if not 0 <= t <= max(T, 0):
        raise ValueError(f"t={t} outside [0, {T}]")
    return cosine_weight(t, T) * eta


def custom_log_lr(t: float, T: float, eta: float, floor: float = LOG_FLOOR_LR) -> float:
    """Geometric interpolation from ``eta`` down to ``floor`` with cosine weights."""
    if not 0 <= t <= max(T, 0):
        raise ValueError(f"t={t} outside [0, {T}]")
    if eta <= 0:
        raise ValueError("eta must be > 0")
    lam = cosine_weight(t, T)
    return math.exp(lam * math.log(eta) + (1.0 - lam) * math.log(floor))


def schedule(name: str, eta: float, T: int, floor: float = LOG_FLOOR_LR):
    if name == "cosine":
        return lambda t: cosine_lr(t, T, eta)
    if name == "custom_log":
        return lambda t: custom_log_lr(t, T, eta, floor)
    raise ValueError(f"unknown scheduler {name!r}")
