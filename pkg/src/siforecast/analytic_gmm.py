"""Closed-form drift, score and time marginals for Gaussian-mixture targets.

If ``x1 | x0`` is the mixture ``sum_j p_j N(m_j, C_j)`` then ``I_s | x0`` is the
mixture with means ``alpha_s x0 + beta_s m_j`` and covariances
``beta_s^2 C_j + s sigma_s^2 Id``, and the drift and score are weighted sums
over components with posterior responsibilities.  These formulas need no
training and serve as the oracle for the learned and sampled quantities.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Union

import numpy as np
from scipy.special import logsumexp

from .errors import DomainError, NumericalError, SingularityError
from .schedules import Schedule, eval_schedule

_LOG_2PI = np.log(2.0 * np.pi)


@dataclass(frozen=True, eq=False)
class GmmSpec:
    """Mixture weights ``(J,)``, means ``(J, d)`` and covariances ``(J, d, d)``."""

    weights: np.ndarray
    means: np.ndarray
    covs: np.ndarray

    def __post_init__(self):
        w = np.atleast_1d(np.asarray(self.weights, dtype=float))
        m = np.asarray(self.means, dtype=float)
        c = np.asarray(self.covs, dtype=float)
        if m.ndim == 1:
            m = m[:, None]
        if c.ndim == 1:
            c = c[:, None, None]
        J, d = m.shape
        if w.shape != (J,) or c.shape != (J, d, d):
            raise DomainError(f"inconsistent mixture shapes: weights {w.shape}, means {m.shape}, covs {c.shape}")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise DomainError("mixture weights must be non-negative and sum to 1")
        if np.max(np.abs(c - np.swapaxes(c, -1, -2)), initial=0.0) > 1e-12:
            raise DomainError("covariances must be symmetric")
        if np.min(np.linalg.eigvalsh(c)) <= 0:
            raise DomainError("covariances must be positive definite")
        for name, arr in (("weights", w), ("means", m), ("covs", c)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def n_components(self) -> int:
        return self.means.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def mean(self) -> np.ndarray:
        return self.weights @ self.means

    def covariance(self) -> np.ndarray:
        mu = self.mean()
        dm = self.means - mu
        return np.einsum("j,jab->ab", self.weights, self.covs) + np.einsum("j,ja,jb->ab", self.weights, dm, dm)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        comp = rng.choice(self.n_components, size=n, p=self.weights)
        chol = np.linalg.cholesky(self.covs)
        z = rng.standard_normal((n, self.dim))
        return self.means[comp] + np.einsum("nab,nb->na", chol[comp], z)

    def to_dict(self) -> dict:
        return {
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "covs_row_major": [c.ravel().tolist() for c in self.covs],
            "dim": self.dim,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "GmmSpec":
        d = int(data["dim"])
        covs = np.asarray(data["covs_row_major"], dtype=float).reshape(-1, d, d)
        return cls(np.asarray(data["weights"]), np.asarray(data["means"]).reshape(-1, d), covs)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "GmmSpec":
        return cls.from_dict(json.loads(Path(path).read_text()))


# x0-dependent mixtures are callables returning a GmmSpec for a given x0.
ConditionalGmm = Union[GmmSpec, Callable[[np.ndarray], GmmSpec]]


def rotation(theta: float) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s], [s, c]])


def rotated_mode_spec(
    n_modes: int = 5,
    base_mean=(5.0, 0.0),
    base_cov=((1.5, 0.0), (0.0, 0.1)),
) -> GmmSpec:
    """Equal-weight mixture obtained by rotating one 2-D Gaussian by multiples of 2*pi/n_modes."""
    m0 = np.asarray(base_mean, dtype=float)
    c0 = np.asarray(base_cov, dtype=float)
    rots = [rotation(2.0 * np.pi * k / n_modes) for k in range(n_modes)]
    means = np.stack([r @ m0 for r in rots])
    covs = np.stack([r @ c0 @ r.T for r in rots])
    covs = 0.5 * (covs + np.swapaxes(covs, -1, -2))
    return GmmSpec(np.full(n_modes, 1.0 / n_modes), means, covs)


@dataclass(frozen=True)
class GmmMarginal:
    """Law of ``I_s | x0`` as a mixture."""

    means: np.ndarray
    covs: np.ndarray
    weights: np.ndarray

    def mean(self) -> np.ndarray:
        return self.weights @ self.means

    def covariance(self) -> np.ndarray:
        mu = self.mean()
        dm = self.means - mu
        return np.einsum("j,jab->ab", self.weights, self.covs) + np.einsum("j,ja,jb->ab", self.weights, dm, dm)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        comp = rng.choice(len(self.weights), size=n, p=self.weights)
        # zero covariances (s=0) are allowed, so factor via eigh instead of Cholesky
        vals, vecs = np.linalg.eigh(self.covs)
        roots = vecs * np.sqrt(np.clip(vals, 0.0, None))[..., None, :]
        z = rng.standard_normal((n, self.means.shape[1]))
        return self.means[comp] + np.einsum("nab,nb->na", roots[comp], z)


def gmm_marginal(spec: GmmSpec, sched: Schedule, s: float, x0) -> GmmMarginal:
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    if callable(spec) and not isinstance(spec, GmmSpec):
        spec = spec(x0)
    v = eval_schedule(sched, s)
    d = spec.dim
    means = float(v.alpha) * x0[None, :] + float(v.beta) * spec.means
    covs = float(v.beta) ** 2 * spec.covs + float(s) * float(v.sigma) ** 2 * np.eye(d)
    return GmmMarginal(means, covs, spec.weights.copy())


def _chol_solve(L, r):
    """Return ``(L^{-1} r, (L L^T)^{-1} r)`` for lower-triangular ``L`` broadcasting over leading axes."""
    d = r.shape[-1]
    y = np.empty(np.broadcast_shapes(L.shape[:-1], r.shape))
    for i in range(d):
        acc = r[..., i] - np.einsum("...k,...k->...", L[..., i, :i], y[..., :i])
        y[..., i] = acc / L[..., i, i]
    u = np.empty_like(y)
    for i in reversed(range(d)):
        acc = y[..., i] - np.einsum("...k,...k->...", L[..., i + 1 :, i], u[..., i + 1 :])
        u[..., i] = acc / L[..., i, i]
    return y, u


def _posterior(spec: GmmSpec, v, s, x, x0):
    """Responsibilities ``(n, J)``, whitened solves ``(n, J, d)`` for each component."""
    d = spec.dim
    beta = v.beta[..., None, None]
    mbar = v.alpha[..., None, None] * x0[:, None, :] + beta * spec.means
    cbar = (
        (v.beta**2)[..., None, None, None] * spec.covs
        + (s * v.sigma**2)[..., None, None, None] * np.eye(d)
    )
    try:
        L = np.linalg.cholesky(cbar)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("marginal covariance is not positive definite", s=s) from exc
    r = x[:, None, :] - mbar
    y, u = _chol_solve(L, r)
    logdet = np.sum(np.log(np.diagonal(L, axis1=-2, axis2=-1)), axis=-1)
    with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
        logp = np.log(spec.weights)
        logw = logp - 0.5 * np.sum(y * y, axis=-1) - logdet - 0.5 * d * _LOG_2PI
    norm = logsumexp(logw, axis=-1, keepdims=True)
    bad = ~np.isfinite(norm[:, 0])
    if np.any(bad):
        row = int(np.flatnonzero(bad)[0])
        raise NumericalError("posterior weights underflow", row=row, x=x[row].tolist())
    return np.exp(logw - norm), u


def _prepare(x, x0, s):
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    x0 = np.asarray(x0, dtype=float)
    x0 = np.broadcast_to(x0, x.shape) if x0.ndim == 1 else x0
    if x0.shape != x.shape:
        raise DomainError(f"dimension mismatch: x {x.shape}, x0 {x0.shape}")
    s = np.broadcast_to(np.asarray(s, dtype=float), x.shape[:1]).copy()
    return x, x0, s, single


def _per_x0(fn, spec, sched, s, x, x0):
    # x0-dependent mixtures: evaluate row by row
    out = np.empty_like(x)
    for i in range(x.shape[0]):
        out[i] = fn(spec(x0[i]), sched, s[i : i + 1], x[i : i + 1], x0[i : i + 1])[0]
    return out


def _drift_rows(spec, sched, s, x, x0):
    out = np.empty_like(x)
    at0 = s == 0.0
    if np.any(at0):
        v0 = eval_schedule(sched, 0.0)
        xs, x0s = x[at0], x0[at0]
        base = float(v0.alpha_dot) * x0s + float(v0.beta_dot) * spec.mean()
        if float(v0.beta_dot) == 0.0:
            # limit s -> 0+ when beta_dot(0) = 0
            out[at0] = base + float(v0.sigma_dot / v0.sigma) * (xs - x0s)
        else:
            if not np.allclose(xs, x0s, rtol=0.0, atol=1e-12):
                raise SingularityError("drift at s=0 is only defined at x = x0 when beta_dot(0) > 0")
            out[at0] = base
    rest = ~at0
    if np.any(rest):
        vr = eval_schedule(sched, s[rest])
        xr, x0r, sr = x[rest], x0[rest], s[rest]
        w, u = _posterior(spec, vr, sr, xr, x0r)
        post_mean = w @ spec.means
        k = (vr.beta * vr.beta_dot)[:, None, None, None] * spec.covs
        corr = np.einsum("njab,njb->nja", k, u) + (sr * vr.sigma * vr.sigma_dot)[:, None, None] * u
        out[rest] = (
            vr.alpha_dot[:, None] * x0r
            + vr.beta_dot[:, None] * post_mean
            + np.einsum("nj,nja->na", w, corr)
        )
    return out


def gmm_drift(spec: ConditionalGmm, sched: Schedule, s, x, x0) -> np.ndarray:
    """Exact drift ``E[R_s | I_s = x, x0]`` for a mixture target.

    ``x`` is ``(d,)`` or ``(n, d)``; ``x0`` is ``(d,)`` or matches ``x``;
    ``s`` is scalar or ``(n,)``.
    """
    x, x0, s, single = _prepare(x, x0, s)
    if callable(spec) and not isinstance(spec, GmmSpec):
        out = _per_x0(_drift_rows, spec, sched, s, x, x0)
    else:
        out = _drift_rows(spec, sched, s, x, x0)
    return out[0] if single else out


def _score_rows(spec, sched, s, x, x0):
    if np.any(s == 0.0):
        raise SingularityError("score of I_s | x0 is undefined at s=0 (point mass)")
    v = eval_schedule(sched, s)
    w, u = _posterior(spec, v, s, x, x0)
    return -np.einsum("nj,nja->na", w, u)


def gmm_score(spec: ConditionalGmm, sched: Schedule, s, x, x0) -> np.ndarray:
    """``grad_x log rho_s(x | x0) = -sum_j w_j(x) Cbar_j^{-1} (x - mbar_j)``."""
    x, x0, s, single = _prepare(x, x0, s)
    if callable(spec) and not isinstance(spec, GmmSpec):
        out = _per_x0(_score_rows, spec, sched, s, x, x0)
    else:
        out = _score_rows(spec, sched, s, x, x0)
    return out[0] if single else out


def responsibilities(spec: GmmSpec, sched: Schedule, s, x, x0) -> np.ndarray:
    """Posterior component weights ``(n, J)`` under the time-s marginal."""
    x, x0, s, _ = _prepare(x, x0, s)
    if np.any(s == 0.0):
        raise SingularityError("responsibilities are undefined at s=0")
    w, _ = _posterior(spec, eval_schedule(sched, s), s, x, x0)
    return w


_IDENTITY_EMBEDDING = Schedule.linear(1.0)


def mixture_score(spec: GmmSpec, x) -> np.ndarray:
    """``grad log rho(x)`` of the mixture itself (the s=1 marginal)."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    return gmm_score(spec, _IDENTITY_EMBEDDING, 1.0, x, np.zeros_like(x))


def mixture_logpdf(spec: GmmSpec, x) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=float))
    L = np.linalg.cholesky(spec.covs)
    y, _ = _chol_solve(L, x[:, None, :] - spec.means)
    logdet = np.sum(np.log(np.diagonal(L, axis1=-2, axis2=-1)), axis=-1)
    with np.errstate(divide="ignore"):
        logw = np.log(spec.weights) - 0.5 * np.sum(y * y, axis=-1) - logdet - 0.5 * spec.dim * _LOG_2PI
    return logsumexp(logw, axis=-1)


class AnalyticGmmDrift:
    """Drift field backed by the closed-form mixture formula."""

    def __init__(self, spec: ConditionalGmm, sched: Schedule):
        self.spec = spec
        self.sched = sched

    def __call__(self, x, x0, s):
        return gmm_drift(self.spec, self.sched, s, x, x0)
