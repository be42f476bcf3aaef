"""Interpolant coefficient schedules and the coefficient algebra built on them.

A schedule is the triple ``(alpha, beta, sigma)`` on ``s in [0, 1]`` with
``alpha(0) = beta(1) = 1`` and ``alpha(1) = beta(0) = sigma(1) = 0``.  The
builtin kinds use ``alpha = 1 - s`` and ``sigma = eps * (1 - s)`` with either
``beta = s`` or ``beta = s**2``.

All functions accept scalar ``s`` or arrays of times.  Vector arguments have
shape ``(..., d)`` and ``s`` must broadcast against ``x.shape[:-1]``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy.interpolate import CubicHermiteSpline

from .errors import DomainError, SingularityError

__all__ = [
    "ScheduleKind",
    "DiffusionKind",
    "Schedule",
    "TabulatedSchedule",
    "DiffusionSchedule",
    "ScheduleValues",
    "CoefficientBundle",
    "eval_schedule",
    "coeff_A",
    "coeff_c",
    "coefficient_bundle",
    "follmer_g",
    "score_from_drift",
    "transform_drift",
    "reference_rate",
]


class ScheduleKind(str, enum.Enum):
    LINEAR_BETA = "linear_beta"
    QUADRATIC_BETA = "quadratic_beta"
    CUSTOM = "custom"


class DiffusionKind(str, enum.Enum):
    MATCH_SIGMA = "match_sigma"
    FOLLMER = "follmer"
    CUSTOM = "custom"


class ScheduleValues(NamedTuple):
    alpha: np.ndarray
    beta: np.ndarray
    sigma: np.ndarray
    alpha_dot: np.ndarray
    beta_dot: np.ndarray
    sigma_dot: np.ndarray


def _check_time(s, lo_open=False, hi_open=False):
    s = np.asarray(s, dtype=float)
    if not np.all(np.isfinite(s)):
        raise DomainError("time s must be finite")
    if np.any(s < 0.0) or np.any(s > 1.0):
        raise DomainError(f"time s must lie in [0, 1], got range [{s.min()}, {s.max()}]")
    if lo_open and np.any(s == 0.0):
        raise SingularityError("coefficient is singular at s=0")
    if hi_open and np.any(s == 1.0):
        raise SingularityError("coefficient is singular at s=1")
    return s


def _col(v):
    return np.asarray(v, dtype=float)[..., None]


@dataclass(frozen=True, eq=False)
class TabulatedSchedule:
    """Tabulated (value, derivative) pairs for a user-supplied schedule.

    Each coefficient is interpolated by a cubic Hermite spline through the
    supplied values and slopes, so the interpolant is C^1 and its derivative
    is consistent with its values.
    """

    s: np.ndarray
    alpha: np.ndarray
    alpha_dot: np.ndarray
    beta: np.ndarray
    beta_dot: np.ndarray
    sigma: np.ndarray
    sigma_dot: np.ndarray
    _splines: tuple = field(init=False, repr=False)

    def __post_init__(self):
        grid = np.asarray(self.s, dtype=float)
        if grid.ndim != 1 or grid.size < 2 or grid[0] != 0.0 or grid[-1] != 1.0:
            raise DomainError("tabulation grid must be 1-D, start at 0 and end at 1")
        if np.any(np.diff(grid) <= 0):
            raise DomainError("tabulation grid must be strictly increasing")
        splines = []
        for name in ("alpha", "beta", "sigma"):
            y = np.asarray(getattr(self, name), dtype=float)
            dy = np.asarray(getattr(self, name + "_dot"), dtype=float)
            if y.shape != grid.shape or dy.shape != grid.shape:
                raise DomainError(f"{name} table does not match the grid")
            splines.append(CubicHermiteSpline(grid, y, dy))
        object.__setattr__(self, "_splines", tuple(splines))

    def __call__(self, s):
        out = []
        for sp in self._splines:
            out.append(sp(s))
            out.append(sp.derivative()(s))
        a, ad, b, bd, g, gd = out
        return a, b, g, ad, bd, gd


@dataclass(frozen=True, eq=False)
class Schedule:
    """Interpolant coefficients ``alpha_s, beta_s, sigma_s`` and their derivatives.

    ``epsilon`` multiplies sigma (and its derivative) for every kind,
    including tabulated ones.
    """

    kind: ScheduleKind = ScheduleKind.QUADRATIC_BETA
    epsilon: float = 1.0
    table: TabulatedSchedule | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", ScheduleKind(self.kind))
        if not (np.isfinite(self.epsilon) and self.epsilon > 0):
            raise DomainError(f"epsilon must be positive, got {self.epsilon}")
        if self.kind is ScheduleKind.CUSTOM:
            if self.table is None:
                raise DomainError("custom schedule needs a table")
            validate_schedule(self)
        elif self.table is not None:
            raise DomainError("only custom schedules carry a table")

    @classmethod
    def linear(cls, epsilon=1.0):
        return cls(ScheduleKind.LINEAR_BETA, epsilon)

    @classmethod
    def quadratic(cls, epsilon=1.0):
        return cls(ScheduleKind.QUADRATIC_BETA, epsilon)

    def __call__(self, s) -> ScheduleValues:
        return eval_schedule(self, s)

    def describe(self):
        return {"kind": self.kind.value, "epsilon": float(self.epsilon)}


def eval_schedule(sched: Schedule, s) -> ScheduleValues:
    """Return ``(alpha, beta, sigma, alpha_dot, beta_dot, sigma_dot)`` at ``s``."""
    s = _check_time(s)
    eps = sched.epsilon
    if sched.kind is ScheduleKind.CUSTOM:
        a, b, g, ad, bd, gd = sched.table(s)
        return ScheduleValues(a, b, eps * g, ad, bd, eps * gd)
    one = np.ones_like(s)
    alpha = 1.0 - s
    sigma = eps * (1.0 - s)
    if sched.kind is ScheduleKind.LINEAR_BETA:
        beta, beta_dot = s.copy(), one.copy()
    else:
        beta, beta_dot = s * s, 2.0 * s
    return ScheduleValues(alpha, beta, sigma, -one, beta_dot, -eps * one)


def validate_schedule(sched: Schedule, n_grid: int = 2001, atol: float = 1e-12):
    """Check boundary conditions and monotonicity on a dense grid.

    Raises DomainError on the first violated condition.
    """
    v0 = eval_schedule(sched, 0.0)
    v1 = eval_schedule(sched, 1.0)
    checks = {
        "alpha(0)=1": abs(v0.alpha - 1.0),
        "beta(0)=0": abs(v0.beta),
        "alpha(1)=0": abs(v1.alpha),
        "beta(1)=1": abs(v1.beta - 1.0),
        "sigma(1)=0": abs(v1.sigma),
    }
    for name, err in checks.items():
        if err > atol:
            raise DomainError(f"schedule violates boundary condition {name} (off by {float(err):.3g})")
    s = np.linspace(0.0, 1.0, n_grid)
    v = eval_schedule(sched, s)
    if np.any(v.beta_dot[1:] <= 0):
        raise DomainError("beta_dot must be positive on (0, 1]")
    if np.any(v.sigma_dot >= 0):
        raise DomainError("sigma_dot must be negative on [0, 1]")
    if np.any(v.alpha**2 + v.beta**2 + v.sigma**2 <= 0):
        raise DomainError("alpha^2 + beta^2 + sigma^2 must stay positive")


class CoefficientBundle(NamedTuple):
    """``A_s`` and ``c_s(x, x0)`` evaluated together."""

    A: np.ndarray
    c: np.ndarray
    s: np.ndarray


def coeff_A(sched: Schedule, s):
    """``A_s = 1 / (s sigma (beta_dot sigma - beta sigma_dot))``; singular at s in {0, 1}."""
    s = _check_time(s, lo_open=True, hi_open=True)
    v = eval_schedule(sched, s)
    return 1.0 / (s * v.sigma * (v.beta_dot * v.sigma - v.beta * v.sigma_dot))


def coeff_c(sched: Schedule, s, x, x0):
    """``c_s(x, x0) = beta_dot x + (beta alpha_dot - beta_dot alpha) x0``."""
    x = np.asarray(x, dtype=float)
    x0 = np.asarray(x0, dtype=float)
    if x.shape[-1:] != x0.shape[-1:]:
        raise DomainError(f"dimension mismatch: x has {x.shape}, x0 has {x0.shape}")
    v = eval_schedule(sched, s)
    return _col(v.beta_dot) * x + _col(v.beta * v.alpha_dot - v.beta_dot * v.alpha) * x0


def coefficient_bundle(sched: Schedule, s, x, x0) -> CoefficientBundle:
    return CoefficientBundle(coeff_A(sched, s), coeff_c(sched, s, x, x0), np.asarray(s, dtype=float))


def _beta_log_slope_times_s(sched, s):
    # s * beta_dot / beta, exact for the builtin kinds; tabulated schedules fill
    # in the s -> 0 limit (and underflowed beta) by probing at a small s.
    if sched.kind is ScheduleKind.LINEAR_BETA:
        return np.ones_like(s)
    if sched.kind is ScheduleKind.QUADRATIC_BETA:
        return np.full_like(s, 2.0)
    v = eval_schedule(sched, s)
    tiny = 1e-9
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = s * v.beta_dot / v.beta
    bad = (s < tiny) | ~np.isfinite(ratio)
    if np.any(bad):
        vt = eval_schedule(sched, tiny)
        ratio = np.where(bad, tiny * vt.beta_dot / vt.beta, ratio)
    return ratio


def follmer_g(sched: Schedule, s):
    """Diffusion coefficient minimising the path KL between exact and learned SDEs.

    ``|2 s sigma (beta_dot sigma / beta - sigma_dot) - sigma^2|^(1/2)``; the s=0
    value is the analytic limit (eps for beta=s, eps*sqrt(3) for beta=s^2).
    """
    s = _check_time(s)
    v = eval_schedule(sched, s)
    r = _beta_log_slope_times_s(sched, s)
    inner = 2.0 * r * v.sigma**2 - 2.0 * s * v.sigma * v.sigma_dot - v.sigma**2
    return np.sqrt(np.abs(inner))


def score_from_drift(sched: Schedule, b, s, x, x0):
    """Score of ``I_s | x0`` recovered from the drift: ``A_s (beta_s b - c_s)``."""
    A = coeff_A(sched, s)
    v = eval_schedule(sched, s)
    b = np.asarray(b, dtype=float)
    return _col(A) * (_col(v.beta) * b - coeff_c(sched, s, x, x0))


@dataclass(frozen=True, eq=False)
class DiffusionSchedule:
    """Diffusion coefficient ``g_s`` used at sampling time.

    ``CUSTOM`` kinds interpolate ``table_g`` on ``table_s`` linearly (g only
    needs to be continuous).
    """

    kind: DiffusionKind
    reference: Schedule
    table_s: np.ndarray | None = None
    table_g: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", DiffusionKind(self.kind))
        if self.kind is DiffusionKind.CUSTOM:
            ts = np.asarray(self.table_s, dtype=float)
            tg = np.asarray(self.table_g, dtype=float)
            if ts.ndim != 1 or ts.shape != tg.shape or ts[0] != 0.0 or ts[-1] != 1.0:
                raise DomainError("custom diffusion table must span [0, 1]")
            if np.any(np.diff(ts) <= 0) or np.any(tg < 0) or not np.all(np.isfinite(tg)):
                raise DomainError("custom diffusion table must be increasing in s with finite g >= 0")
            object.__setattr__(self, "table_s", ts)
            object.__setattr__(self, "table_g", tg)

    @classmethod
    def match_sigma(cls, sched):
        return cls(DiffusionKind.MATCH_SIGMA, sched)

    @classmethod
    def follmer(cls, sched):
        return cls(DiffusionKind.FOLLMER, sched)

    def __call__(self, s):
        s = _check_time(s)
        if self.kind is DiffusionKind.MATCH_SIGMA:
            return eval_schedule(self.reference, s).sigma
        if self.kind is DiffusionKind.FOLLMER:
            return follmer_g(self.reference, s)
        return np.interp(s, self.table_s, self.table_g)

    def endpoint_limits(self, n=12):
        """Probe ``(g^2 - sigma^2)/s`` near 0 and ``g^2/sigma`` near 1 on geometric grids.

        Returns the two probe sequences; a finite limit shows up as a
        sequence whose successive differences shrink.
        """
        h = np.geomspace(1e-2, 1e-2 * 2.0 ** -(n - 1), n)
        sig0 = eval_schedule(self.reference, h).sigma
        near0 = (self(h) ** 2 - sig0**2) / h
        sig1 = eval_schedule(self.reference, 1.0 - h).sigma
        near1 = self(1.0 - h) ** 2 / sig1
        return near0, near1


def transform_drift(sched: Schedule, g: DiffusionSchedule, b, s, x, x0):
    """Drift ``b^g`` giving the same time marginals with diffusion ``g`` instead of ``sigma``.

    ``b + (g^2 - sigma^2)/2 * A_s (beta b - c_s)``.  Matching diffusion returns
    ``b`` untouched; every other choice is undefined at s=0 and s=1, where
    samplers use the endpoint conventions instead.
    """
    b = np.asarray(b, dtype=float)
    if g.kind is DiffusionKind.MATCH_SIGMA:
        _check_time(s)
        return b
    s = _check_time(s, lo_open=True, hi_open=True)
    v = eval_schedule(sched, s)
    gs = g(s)
    score = score_from_drift(sched, b, s, x, x0)
    return b + _col(0.5 * (gs**2 - v.sigma**2)) * score


def reference_rate(sched: Schedule, s):
    """Linear drift rate ``a_s = d/ds log((beta^2 + s sigma^2)/beta)`` of the Follmer reference process."""
    s = _check_time(s, lo_open=True, hi_open=True)
    v = eval_schedule(sched, s)
    lam = v.beta_dot / v.beta
    gf2 = 2.0 * s * v.sigma * (lam * v.sigma - v.sigma_dot) - v.sigma**2
    return lam - gf2 / (v.beta**2 + s * v.sigma**2)
