"""Interpolant draws and the empirical square loss for drift regression.

For a pair ``(x0, x1)``, a time ``s`` and a standard normal ``z``::

    I_s = alpha_s x0 + beta_s x1 + sqrt(s) sigma_s z
    R_s = alpha_dot_s x0 + beta_dot_s x1 + sqrt(s) sigma_dot_s z

The drift is the regression of ``R_s`` on ``(I_s, x0, s)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import DomainError
from .schedules import Schedule, eval_schedule

# Drift fields are called as drift(x, x0, s) with x, x0 of shape (n, d) and
# s a scalar or an (n,) array; they return an (n, d) array.
DriftField = Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class SamplePair:
    x0: np.ndarray
    x1: np.ndarray

    def __post_init__(self):
        x0 = np.atleast_1d(np.asarray(self.x0, dtype=float))
        x1 = np.atleast_1d(np.asarray(self.x1, dtype=float))
        if x0.shape != x1.shape:
            raise DomainError(f"pair dimensions differ: {x0.shape} vs {x1.shape}")
        object.__setattr__(self, "x0", x0)
        object.__setattr__(self, "x1", x1)


@dataclass(frozen=True)
class InterpolantDraw:
    s: float
    z: np.ndarray
    I: np.ndarray
    R: np.ndarray


def interpolate(sched: Schedule, x0, x1, s, z):
    """Batched ``(I_s, R_s)`` for arrays of pairs; ``s`` is scalar or has shape ``(n,)``."""
    x0 = np.asarray(x0, dtype=float)
    x1 = np.asarray(x1, dtype=float)
    z = np.asarray(z, dtype=float)
    if not (x0.shape == x1.shape == z.shape):
        raise DomainError(f"shape mismatch: x0 {x0.shape}, x1 {x1.shape}, z {z.shape}")
    s = np.asarray(s, dtype=float)
    v = eval_schedule(sched, s)
    rs = np.sqrt(s)[..., None]
    I = v.alpha[..., None] * x0 + v.beta[..., None] * x1 + rs * v.sigma[..., None] * z
    R = v.alpha_dot[..., None] * x0 + v.beta_dot[..., None] * x1 + rs * v.sigma_dot[..., None] * z
    return I, R


def draw(sched: Schedule, pair: SamplePair, s: float, z) -> InterpolantDraw:
    z = np.atleast_1d(np.asarray(z, dtype=float))
    if z.shape != pair.x0.shape:
        raise DomainError(f"noise has shape {z.shape}, pair has {pair.x0.shape}")
    I, R = interpolate(sched, pair.x0, pair.x1, s, z)
    return InterpolantDraw(float(s), z, I, R)


def _stack_batch(batch):
    if isinstance(batch, tuple) and len(batch) == 2:
        return np.asarray(batch[0], dtype=float), np.asarray(batch[1], dtype=float)
    if len(batch) == 0:
        raise DomainError("empty batch")
    return np.stack([p.x0 for p in batch]), np.stack([p.x1 for p in batch])


def per_sample_loss(sched: Schedule, drift: DriftField, batch, s_draws, z_draws) -> np.ndarray:
    """``|drift(I_k, x0_k, s_k) - R_k|^2`` for every sample of the batch."""
    x0, x1 = _stack_batch(batch)
    s = np.asarray(s_draws, dtype=float)
    z = np.asarray(z_draws, dtype=float)
    if x0.shape[0] == 0:
        raise DomainError("empty batch")
    if s.shape != (x0.shape[0],) or z.shape != x0.shape:
        raise DomainError(
            f"batch of {x0.shape[0]} pairs needs {x0.shape[0]} times and noises, "
            f"got s {s.shape}, z {z.shape}"
        )
    I, R = interpolate(sched, x0, x1, s, z)
    resid = drift(I, x0, s) - R
    return np.sum(resid * resid, axis=-1)


def empirical_loss(sched: Schedule, drift: DriftField, batch, s_draws, z_draws) -> float:
    """Mean square regression error over the batch.

    ``batch`` is a sequence of SamplePair or an ``(x0, x1)`` tuple of
    ``(K, d)`` arrays.  One time and one noise vector per sample.
    """
    return float(np.mean(per_sample_loss(sched, drift, batch, s_draws, z_draws)))


def draw_loss_inputs(rng: np.random.Generator, n: int, d: int):
    """Uniform times and standard normal noise for ``n`` samples."""
    return rng.uniform(0.0, 1.0, size=n), rng.standard_normal((n, d))
