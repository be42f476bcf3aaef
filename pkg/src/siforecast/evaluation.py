"""Statistical comparison of forecast ensembles with reference samples."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist
from scipy.stats import gaussian_kde

from .errors import DomainError
from .rng import generator

DENSITY_FLOOR = 1e-12


@dataclass
class Kde1d:
    samples: np.ndarray
    bandwidth: float
    grid: np.ndarray
    density: np.ndarray

    def mass(self) -> float:
        return float(np.trapezoid(self.density, self.grid))


def scott_bandwidth(x) -> float:
    x = np.asarray(x, dtype=float)
    return float(np.std(x, ddof=1) * x.size ** (-1.0 / 5.0))


def _check_samples(x, name, min_size=100):
    x = np.asarray(x, dtype=float).ravel()
    if x.size < min_size:
        raise DomainError(f"{name}: need at least {min_size} samples, got {x.size}")
    if not np.all(np.isfinite(x)):
        raise DomainError(f"{name}: non-finite samples")
    if np.std(x) == 0:
        raise DomainError(f"{name}: degenerate samples (zero variance)")
    return x


def kde(samples, grid=None, bandwidth: float | str = "scott", n_grid: int = 512, pad: float = 3.0) -> Kde1d:
    """Gaussian kernel density estimate evaluated on a grid.

    Without an explicit grid, the grid spans the data range padded by ``pad``
    bandwidths.
    """
    x = _check_samples(samples, "samples", min_size=2)
    h = scott_bandwidth(x) if bandwidth == "scott" else float(bandwidth)
    if grid is None:
        grid = np.linspace(x.min() - pad * h, x.max() + pad * h, n_grid)
    grid = np.asarray(grid, dtype=float)
    est = gaussian_kde(x, bw_method=h / np.std(x, ddof=1))
    return Kde1d(x, h, grid, est(grid))


@dataclass
class KlEstimate:
    value: float
    std: float
    bootstrap_mean: float
    grid: np.ndarray
    p_density: np.ndarray
    q_density: np.ndarray


def _kl_on_grid(p, q, grid, floor):
    p = np.maximum(p, floor)
    q = np.maximum(q, floor)
    p = p / np.trapezoid(p, grid)
    q = q / np.trapezoid(q, grid)
    return float(np.trapezoid(p * np.log(p / q), grid))


def kde_kl(
    samples_p,
    samples_q,
    grid=None,
    bandwidth: float | str = "scott",
    n_boot: int = 50,
    seed: int = 0,
    n_grid: int = 512,
    floor: float = DENSITY_FLOOR,
) -> KlEstimate:
    """``KL(p || q)`` between Gaussian KDEs of two 1-D sample sets on a shared grid.

    The spread is the standard deviation over ``n_boot`` bootstrap resamples
    of both sets (each resample refits its own bandwidth).
    """
    p = _check_samples(samples_p, "samples_p")
    q = _check_samples(samples_q, "samples_q")
    hp = scott_bandwidth(p) if bandwidth == "scott" else float(bandwidth)
    hq = scott_bandwidth(q) if bandwidth == "scott" else float(bandwidth)
    if grid is None:
        h = max(hp, hq)
        lo = min(p.min(), q.min()) - 3.0 * h
        hi = max(p.max(), q.max()) + 3.0 * h
        grid = np.linspace(lo, hi, n_grid)
    grid = np.asarray(grid, dtype=float)
    kp = kde(p, grid, bandwidth)
    kq = kde(q, grid, bandwidth)
    value = _kl_on_grid(kp.density, kq.density, grid, floor)
    boots = []
    gen = generator(seed, "bootstrap")
    for _ in range(n_boot):
        bp = p[gen.integers(0, p.size, p.size)]
        bq = q[gen.integers(0, q.size, q.size)]
        boots.append(_kl_on_grid(kde(bp, grid, bandwidth).density, kde(bq, grid, bandwidth).density, grid, floor))
    boots = np.asarray(boots)
    std = float(boots.std(ddof=1)) if n_boot > 1 else 0.0
    mean = float(boots.mean()) if n_boot else value
    return KlEstimate(value, std, mean, grid, kp.density, kq.density)


@dataclass
class ErrorReport:
    err_mean: float
    err_std: float
    mean_is_absolute: bool = False
    std_is_absolute: bool = False


def _rel(a, b):
    num = float(np.linalg.norm(a - b))
    den = float(np.linalg.norm(b))
    if den == 0.0:
        return num, True
    return num / den, False


def conditional_moment_errors(ensemble, reference) -> ErrorReport:
    """Relative L2 errors of the fieldwise mean and standard deviation.

    Falls back to the absolute error (and sets the flag) when the reference
    moment is identically zero.
    """
    ens = np.asarray(getattr(ensemble, "samples", ensemble), dtype=float)
    ref = np.asarray(getattr(reference, "samples", reference), dtype=float)
    if ens.ndim == 1:
        ens = ens[:, None]
    if ref.ndim == 1:
        ref = ref[:, None]
    if ens.shape[1:] != ref.shape[1:]:
        raise DomainError(f"dimension mismatch: ensemble {ens.shape[1:]} vs reference {ref.shape[1:]}")
    em, es = _rel(ens.mean(axis=0), ref.mean(axis=0))
    sm, ss = _rel(ens.std(axis=0, ddof=1), ref.std(axis=0, ddof=1))
    return ErrorReport(em, sm, es, ss)


def energy_statistic(a, b) -> float:
    a = np.atleast_2d(np.asarray(a, dtype=float).reshape(len(a), -1))
    b = np.atleast_2d(np.asarray(b, dtype=float).reshape(len(b), -1))
    return float(2.0 * cdist(a, b).mean() - cdist(a, a).mean() - cdist(b, b).mean())


def energy_distance_test(a, b, n_permutations: int = 500, seed: int = 0, max_points: int = 2000) -> float:
    """Permutation p-value of the two-sample energy statistic.

    Sets larger than ``max_points`` are thinned by a seeded subsample.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    a = a.reshape(len(a), -1)
    b = b.reshape(len(b), -1)
    if a.shape[1] != b.shape[1]:
        raise DomainError("samples have different dimensions")
    if len(a) < 2 or len(b) < 2:
        raise DomainError("energy test needs at least two samples per set")
    gen = generator(seed, "permutation")
    if len(a) > max_points:
        a = a[np.sort(gen.choice(len(a), max_points, replace=False))]
    if len(b) > max_points:
        b = b[np.sort(gen.choice(len(b), max_points, replace=False))]
    pooled = np.concatenate([a, b])
    D = cdist(pooled, pooled)
    na, nb = len(a), len(b)
    if np.all(D == 0):
        raise DomainError("degenerate samples: all points coincide")

    def stats(labels):
        # labels: (P, n) indicator of the first group
        u = labels.astype(float)
        w = 1.0 - u
        Du = D @ u.T
        Dw = D @ w.T
        s_ab = np.einsum("pn,np->p", w, Du)
        s_aa = np.einsum("pn,np->p", u, Du)
        s_bb = np.einsum("pn,np->p", w, Dw)
        return 2.0 * s_ab / (na * nb) - s_aa / na**2 - s_bb / nb**2

    obs = stats(np.r_[np.ones(na), np.zeros(nb)][None, :])[0]
    perms = np.zeros((n_permutations, na + nb))
    for i in range(n_permutations):
        perms[i, gen.permutation(na + nb)[:na]] = 1.0
    null = []
    for chunk in np.array_split(perms, max(1, n_permutations // 50)):
        null.append(stats(chunk))
    null = np.concatenate(null)
    return float((1 + np.sum(null >= obs - 1e-12 * abs(obs))) / (1 + n_permutations))
