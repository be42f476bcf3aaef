"""Ground-truth simulators: a rotating-mode jump diffusion and 2-D stochastic Navier-Stokes.

Navier-Stokes fields live on the torus ``[0, 2pi)^2`` sampled on an ``n x n``
grid; arrays are indexed ``field[ix, iy]``.  Spectral fields use ``rfft2`` over
the last two axes, so the trailing axis holds the non-negative ``ky``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .analytic_gmm import GmmSpec, mixture_score, rotated_mode_spec, rotation
from .datasets import TransitionDataset
from .errors import DomainError, NumericalError
from .rng import generator

# -- jump diffusion ----------------------------------------------------------------


@dataclass
class JumpDiffusionConfig:
    spec: GmmSpec = field(default_factory=rotated_mode_spec)
    rate: float = 2.0
    dt: float = 0.01
    lag: float = 0.5
    angle: float = 2.0 * np.pi / 5.0
    seed: int = 0

    def __post_init__(self):
        if self.rate < 0 or self.dt <= 0 or self.lag <= 0:
            raise DomainError("rate must be >= 0 and dt, lag > 0")
        if self.rate * self.dt >= 1.0:
            raise DomainError(f"jump probability rate*dt = {self.rate * self.dt} must be < 1")
        if self.spec.dim != 2:
            raise DomainError("jump diffusion is two-dimensional")

    @property
    def steps_per_lag(self) -> int:
        n = int(round(self.lag / self.dt))
        if n < 1 or not np.isclose(n * self.dt, self.lag):
            raise DomainError(f"lag {self.lag} is not a multiple of dt {self.dt}")
        return n

    def describe(self) -> dict:
        d = {k: v for k, v in asdict(self).items() if k != "spec"}
        d["spec"] = self.spec.to_dict()
        return d


def jump_diffusion_step(state, cfg: JumpDiffusionConfig, rng=None, xi=None, jump=None) -> np.ndarray:
    """One Langevin step ``x + dt grad log rho + sqrt(2 dt) xi``, then a rotation w.p. ``rate*dt``.

    ``state`` is ``(2,)`` or ``(n, 2)``.  ``xi`` and ``jump`` may be passed
    explicitly; otherwise they are drawn from ``rng``.
    """
    x = np.asarray(state, dtype=float)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if xi is None:
        xi = rng.standard_normal(x.shape)
    if jump is None:
        jump = rng.random(x.shape[0]) < cfg.rate * cfg.dt
    xi = np.broadcast_to(np.asarray(xi, dtype=float), x.shape)
    jump = np.broadcast_to(np.asarray(jump, dtype=bool), x.shape[:1])
    y = x + cfg.dt * mixture_score(cfg.spec, x) + np.sqrt(2.0 * cfg.dt) * xi
    y = np.where(jump[:, None], y @ rotation(cfg.angle).T, y)
    return y[0] if single else y


def _advance(x, cfg, rng, n_steps):
    for _ in range(n_steps):
        x = jump_diffusion_step(x, cfg, rng)
    return x


def simulate_jump_diffusion(
    cfg: JumpDiffusionConfig,
    n_pairs: int,
    burn_in: float = 20.0,
    n_chains: int = 1000,
) -> TransitionDataset:
    """Lag-``cfg.lag`` pairs from ``n_chains`` independent stationary chains.

    Chains start from the invariant mixture, run ``burn_in`` time units, then
    each contributes consecutive pairs ``(x_t, x_{t+lag})`` along its path.
    """
    if n_pairs < 1:
        raise DomainError("n_pairs must be >= 1")
    n_chains = min(n_chains, n_pairs)
    per_chain = -(-n_pairs // n_chains)
    rng = generator(cfg.seed, "jump_diffusion")
    x = cfg.spec.sample(n_chains, rng)
    x = _advance(x, cfg, rng, int(round(burn_in / cfg.dt)))
    k = cfg.steps_per_lag
    path = [x]
    for _ in range(per_chain):
        x = _advance(x, cfg, rng, k)
        path.append(x)
    path = np.stack(path)  # (per_chain + 1, n_chains, 2)
    x0 = path[:-1].transpose(1, 0, 2).reshape(-1, 2)[:n_pairs]
    x1 = path[1:].transpose(1, 0, 2).reshape(-1, 2)[:n_pairs]
    meta = {"task": "jump_diffusion", "burn_in": burn_in, "n_chains": n_chains, **cfg.describe()}
    return TransitionDataset(x0, x1, lag=cfg.lag, scale=1.0, meta=meta)


def conditional_samples(cfg: JumpDiffusionConfig, x0, n: int, lags: int = 1, stream: int = 1) -> np.ndarray:
    """``n`` simulated realizations of the state ``lags * lag`` after ``x0``.

    Returns ``(lags, n, 2)``: row ``j`` is the law after ``j + 1`` lags.
    """
    rng = generator(cfg.seed, "jump_diffusion", stream)
    x = np.broadcast_to(np.asarray(x0, dtype=float), (n, 2)).copy()
    out = []
    for _ in range(lags):
        x = _advance(x, cfg, rng, cfg.steps_per_lag)
        out.append(x.copy())
    return np.stack(out)


def mode_index(x, spec: GmmSpec) -> np.ndarray:
    """Nearest-mode label by angle, used for occupancy statistics."""
    x = np.atleast_2d(x)
    ang = np.arctan2(x[:, 1], x[:, 0])
    mode_ang = np.arctan2(spec.means[:, 1], spec.means[:, 0])
    diff = np.angle(np.exp(1j * (ang[:, None] - mode_ang[None, :])))
    return np.argmin(np.abs(diff), axis=1)


# -- Navier-Stokes -----------------------------------------------------------------

# (kind, kx, ky) for the eight forced modes
FORCING_MODES = (
    ("sin", 6, 0),
    ("cos", 7, 0),
    ("sin", 5, 5),
    ("cos", 8, 8),
    ("cos", 6, 0),
    ("sin", 7, 0),
    ("cos", 5, 5),
    ("sin", 8, 8),
)


@dataclass
class NavierStokesConfig:
    n: int = 64
    viscosity: float = 1e-3
    damping: float = 0.1
    forcing: float = 1.0
    dt: float = 1e-4
    snapshot_interval: float = 0.5
    seed: int = 0
    blowup: float = 1e4
    velocity_bound: float = 20.0
    cfl_max: float = 0.5

    def __post_init__(self):
        if self.n < 4 or self.n & (self.n - 1):
            raise DomainError(f"grid size must be a power of two >= 4, got {self.n}")
        if self.viscosity < 0 or self.damping < 0 or self.dt <= 0:
            raise DomainError("viscosity and damping must be >= 0 and dt > 0")
        kmax = self.n // 3
        if (self.viscosity * 2 * kmax**2 + self.damping) * self.dt >= 1.0:
            raise DomainError("explicit step unstable for the dissipative terms; reduce dt")
        cfl = self.velocity_bound * self.dt / (2.0 * np.pi / self.n)
        if cfl > self.cfl_max:
            raise DomainError(f"CFL number {cfl:.3g} exceeds {self.cfl_max}; reduce dt")
        if 8 > kmax:
            raise DomainError("grid too coarse to carry the forced modes after dealiasing")

    @property
    def steps_per_snapshot(self) -> int:
        n = int(round(self.snapshot_interval / self.dt))
        if n < 1 or not np.isclose(n * self.dt, self.snapshot_interval):
            raise DomainError("snapshot interval is not a multiple of dt")
        return n


def grid(n: int):
    x = 2.0 * np.pi * np.arange(n) / n
    return np.meshgrid(x, x, indexing="ij")


def wavenumbers(n: int):
    kx = np.fft.fftfreq(n, 1.0 / n)[:, None]
    ky = np.fft.rfftfreq(n, 1.0 / n)[None, :]
    return kx, ky


def dealias_mask(n: int) -> np.ndarray:
    kx, ky = wavenumbers(n)
    cut = n / 3.0
    return (np.abs(kx) < cut) & (np.abs(ky) < cut)


def forcing_fields(n: int) -> np.ndarray:
    """The eight physical forcing patterns, shape ``(8, n, n)``."""
    X, Y = grid(n)
    out = []
    for kind, kx, ky in FORCING_MODES:
        phase = kx * X + ky * Y
        out.append(np.sin(phase) if kind == "sin" else np.cos(phase))
    return np.stack(out)


def forcing_covariance(t, t2, dx, dy) -> np.ndarray:
    """Closed-form space-time covariance of the accumulated forcing."""
    return np.minimum(t, t2) * (
        np.cos(6 * dx) + np.cos(7 * dx) + np.cos(5 * (dx + dy)) + np.cos(8 * (dx + dy))
    )


class _Operators:
    def __init__(self, cfg: NavierStokesConfig):
        n = cfg.n
        self.kx, self.ky = wavenumbers(n)
        self.k2 = self.kx**2 + self.ky**2
        self.inv_k2 = np.where(self.k2 > 0, 1.0 / np.where(self.k2 > 0, self.k2, 1.0), 0.0)
        self.mask = dealias_mask(n)
        self.linear = cfg.viscosity * self.k2 + cfg.damping
        self.forcing_hat = np.fft.rfft2(forcing_fields(n)) * self.mask


_OPS: dict = {}


def _ops(cfg: NavierStokesConfig) -> _Operators:
    key = (cfg.n, cfg.viscosity, cfg.damping)
    if key not in _OPS:
        _OPS[key] = _Operators(cfg)
    return _OPS[key]


def to_spectral(omega) -> np.ndarray:
    return np.fft.rfft2(np.asarray(omega, dtype=float))


def to_physical(omega_hat, n: int) -> np.ndarray:
    return np.fft.irfft2(omega_hat, s=(n, n))


def advection_hat(omega_hat, cfg: NavierStokesConfig) -> np.ndarray:
    """Dealiased spectral transform of ``v . grad omega`` with ``v = (-psi_y, psi_x)``."""
    op = _ops(cfg)
    n = cfg.n
    psi_hat = omega_hat * op.inv_k2
    u = to_physical(-1j * op.ky * psi_hat, n)
    v = to_physical(1j * op.kx * psi_hat, n)
    wx = to_physical(1j * op.kx * omega_hat, n)
    wy = to_physical(1j * op.ky * omega_hat, n)
    return np.fft.rfft2(u * wx + v * wy) * op.mask


def ns_step(omega_hat, cfg: NavierStokesConfig, rng=None, dW=None, t: float = 0.0) -> np.ndarray:
    """One explicit Euler-Maruyama step of the damped, forced vorticity equation.

    ``omega_hat`` has shape ``(..., n, n//2+1)``; ``dW`` holds the eight Wiener
    increments per field, shape ``(..., 8)``.  With ``rng`` given and ``dW``
    omitted, increments are drawn as ``N(0, dt)``; with neither, the step is
    unforced.
    """
    op = _ops(cfg)
    w = np.asarray(omega_hat) * op.mask
    rhs = -advection_hat(w, cfg) - op.linear * w
    new = w + cfg.dt * rhs
    if dW is None and rng is not None:
        dW = rng.standard_normal(w.shape[:-2] + (8,)) * np.sqrt(cfg.dt)
    if dW is not None:
        new = new + cfg.forcing * np.tensordot(np.asarray(dW), op.forcing_hat, axes=([-1], [0]))
    _check_blowup(new, cfg, t + cfg.dt)
    return new


def _check_blowup(w_hat, cfg, t):
    # max|omega| <= sum|omega_hat| / n^2 (doubled for the half spectrum)
    bound = 2.0 * np.abs(w_hat).sum(axis=(-2, -1)) / cfg.n**2
    if not np.all(np.isfinite(bound)) or np.any(bound > cfg.blowup):
        omega = to_physical(w_hat, cfg.n)
        peak = np.max(np.abs(omega))
        if not np.isfinite(peak) or peak > cfg.blowup:
            raise NumericalError("vorticity blow-up", time=float(t), max_abs_vorticity=float(peak))


def l2_norm(omega) -> np.ndarray:
    """Continuum ``L^2`` norm on the torus, ``sqrt(sum omega^2 * dx * dy)``, per field."""
    omega = np.asarray(omega, dtype=float)
    n = omega.shape[-1]
    return np.sqrt(np.sum(omega**2, axis=(-2, -1))) * (2.0 * np.pi / n)


def integrate_ns(omega_hat, cfg: NavierStokesConfig, n_steps: int, gens, t0: float = 0.0):
    """Advance a batch of spectral fields by ``n_steps``; ``gens[b]`` drives trajectory ``b``."""
    w = omega_hat
    batch = w.shape[0]
    sdt = np.sqrt(cfg.dt)
    chunk = 1000
    done = 0
    while done < n_steps:
        m = min(chunk, n_steps - done)
        dW = np.stack([g.standard_normal((m, 8)) for g in gens], axis=1) * sdt  # (m, batch, 8)
        for i in range(m):
            w = ns_step(w, cfg, dW=dW[i], t=t0 + (done + i) * cfg.dt)
        done += m
    assert w.shape[0] == batch
    return w


def simulate_ns(
    cfg: NavierStokesConfig,
    n_snapshots: int,
    burn_in_time: float = 5.0,
    n_trajectories: int = 1,
    omega0=None,
) -> tuple[TransitionDataset, np.ndarray]:
    """Snapshot pairs one interval apart, normalized to unit mean ``L^2`` norm.

    Returns the dataset of flattened fields and the normalized snapshot stack
    ``(n_trajectories, n_snapshots, n, n)``.
    """
    if n_snapshots < 2:
        raise DomainError("need at least two snapshots to form a pair")
    n = cfg.n
    gens = [generator(cfg.seed, "navier_stokes", b) for b in range(n_trajectories)]
    if omega0 is None:
        w = np.zeros((n_trajectories, n, n // 2 + 1), dtype=complex)
    else:
        w = to_spectral(np.broadcast_to(omega0, (n_trajectories, n, n)))
    burn = int(round(burn_in_time / cfg.dt))
    w = integrate_ns(w, cfg, burn, gens)
    t = burn * cfg.dt
    snaps = []
    k = cfg.steps_per_snapshot
    for _ in range(n_snapshots):
        snaps.append(to_physical(w, n))
        w = integrate_ns(w, cfg, k, gens, t0=t)
        t += k * cfg.dt
    snaps = np.stack(snaps, axis=1)  # (traj, snap, n, n)
    scale = 1.0 / float(np.mean(l2_norm(snaps)))
    snaps = snaps * scale
    x0 = snaps[:, :-1].reshape(-1, n * n)
    x1 = snaps[:, 1:].reshape(-1, n * n)
    meta = {
        "task": "navier_stokes",
        "burn_in_time": burn_in_time,
        "n_trajectories": n_trajectories,
        "n_snapshots": n_snapshots,
        "field_shape": [n, n],
        **asdict(cfg),
    }
    return TransitionDataset(x0, x1, lag=cfg.snapshot_interval, scale=scale, meta=meta), snaps


def enstrophy_spectrum(omega) -> np.ndarray:
    """Shell sums ``E(k) = sum_{k <= |m| < k+1} |omega_hat(m)|^2`` for ``k = 0, 1, ...``.

    ``omega_hat`` are the Fourier-series coefficients (``fft2 / n^2``), so the
    shells add up to the grid mean of ``omega^2``.  Leading axes are batch axes.
    """
    omega = np.asarray(omega, dtype=float)
    if omega.ndim < 2 or omega.shape[-1] != omega.shape[-2]:
        raise DomainError("enstrophy spectrum needs square fields")
    n = omega.shape[-1]
    power = np.abs(np.fft.fft2(omega) / n**2) ** 2
    k = np.fft.fftfreq(n, 1.0 / n)
    shell = np.floor(np.sqrt(k[:, None] ** 2 + k[None, :] ** 2)).astype(int).ravel()
    n_shells = shell.max() + 1
    flat = power.reshape(power.shape[:-2] + (-1,))
    out = np.zeros(flat.shape[:-1] + (n_shells,))
    for idx in np.ndindex(flat.shape[:-1]):
        out[idx] = np.bincount(shell, weights=flat[idx], minlength=n_shells)
    return out


def total_enstrophy(omega) -> np.ndarray:
    return np.mean(np.asarray(omega, dtype=float) ** 2, axis=(-2, -1))


def total_energy(omega) -> np.ndarray:
    """Grid mean of ``|v|^2 / 2`` computed spectrally as ``sum |omega_hat|^2 / (2|k|^2)``."""
    omega = np.asarray(omega, dtype=float)
    n = omega.shape[-1]
    k = np.fft.fftfreq(n, 1.0 / n)
    k2 = k[:, None] ** 2 + k[None, :] ** 2
    inv = np.where(k2 > 0, 1.0 / np.where(k2 > 0, k2, 1.0), 0.0)
    return 0.5 * np.sum(np.abs(np.fft.fft2(omega) / n**2) ** 2 * inv, axis=(-2, -1))


def downsample(omega, m: int) -> np.ndarray:
    """Spectral truncation of ``n x n`` fields to ``m x m`` (Nyquist modes dropped)."""
    omega = np.asarray(omega, dtype=float)
    n = omega.shape[-1]
    if m > n or m < 2 or m % 2:
        raise DomainError(f"target size must be even and <= {n}")
    spec = np.fft.fft2(omega)
    k = np.fft.fftfreq(n, 1.0 / n).astype(int)
    keep = np.nonzero(np.abs(k) < m // 2)[0]
    sub = spec[..., keep[:, None], keep[None, :]]
    out = np.zeros(omega.shape[:-2] + (m, m), dtype=complex)
    kk = k[keep] % m
    out[..., kk[:, None], kk[None, :]] = sub
    return np.real(np.fft.ifft2(out)) * (m / n) ** 2
