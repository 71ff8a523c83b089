"""AdamW with decoupled weight decay, warmup/cosine schedule, gradient clipping."""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor

__all__ = [
    "TrainingDiverged", "OptimizerState", "adamw_step", "lr_at", "clip_gradients",
]


class TrainingDiverged(RuntimeError):
    """Raised when a non-finite gradient or loss is observed."""


class OptimizerState:
    """Per-parameter first/second moments plus step counter and hyperparameters."""

    def __init__(self, params: dict[str, Tensor], beta1: float = 0.9,
                 beta2: float = 0.95, weight_decay: float = 1e-4, eps: float = 1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.weight_decay = weight_decay
        self.eps = eps
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}


def adamw_step(params: dict[str, Tensor], grads: dict[str, np.ndarray],
               state: OptimizerState, lr: float) -> None:
    """One AdamW update in place.

    Weight decay is decoupled: parameters shrink by lr * wd * p independently
    of the gradient path.  Moments are bias-corrected.
    """
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            raise TrainingDiverged(f"non-finite gradient for parameter '{name}' at step {t}")
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        if state.weight_decay:
            p.data -= lr * state.weight_decay * p.data
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def lr_at(step: int, warmup_steps: int, total_steps: int, base_lr: float) -> float:
    """Linear warmup to base_lr, then cosine decay to zero at total_steps."""
    if total_steps <= warmup_steps:
        raise ValueError(f"total_steps ({total_steps}) must exceed warmup_steps ({warmup_steps})")
    if step < warmup_steps:
        return base_lr * step / max(warmup_steps, 1)
    frac = (step - warmup_steps) / (total_steps - warmup_steps)
    frac = min(frac, 1.0)
    return base_lr * 0.5 * (1.0 + np.cos(np.pi * frac))


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale all gradients so the global L2 norm is at most max_norm.

    Returns the pre-clip global norm.
    """
    total = 0.0
    for g in grads.values():
        total += float((g * g).sum())
    norm = float(np.sqrt(total))
    if norm > max_norm and norm > 0.0:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm
