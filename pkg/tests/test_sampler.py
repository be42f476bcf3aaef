import numpy as np
import pytest

from siforecast.analytic_gmm import AnalyticGmmDrift, GmmSpec, gmm_marginal
from siforecast.errors import DomainError, NumericalError, SingularityError
from siforecast.evaluation import energy_distance_test
from siforecast.sampler import (
    ForecastEnsemble,
    SamplerConfig,
    path_kl,
    path_kl_weight,
    reference_process_check,
    rollout,
    sample_ensemble,
    sample_one,
    sample_path_marginals,
    trapezoid_weights,
)
from siforecast.schedules import DiffusionKind, DiffusionSchedule, Schedule, eval_schedule

L1 = Schedule.linear(1.0)
Q1 = Schedule.quadratic(1.0)
N21 = GmmSpec([1.0], [[2.0]], [[[1.0]]])


def zero_drift(x, x0, s):
    return np.zeros_like(x)


def test_zero_drift_is_scaled_random_walk():
    cfg = SamplerConfig(n_steps=50, ensemble_size=20000, seed=3)
    X = sample_ensemble(zero_drift, L1, cfg, [0.0]).samples[:, 0]
    # match_sigma, linear, eps=1: sum of sigma_n^2 ds over the left-point grid
    s = cfg.s_grid()[:-1]
    var = np.sum((1 - s) ** 2 * np.diff(cfg.s_grid()))
    assert abs(X.mean()) < 4 * np.sqrt(var / X.size)
    assert X.var() == pytest.approx(var, rel=0.05)


@pytest.mark.parametrize("diffusion", ["match_sigma", "follmer"])
def test_single_gaussian_terminal_moments(diffusion):
    cfg = SamplerConfig(n_steps=200, ensemble_size=20000, diffusion=diffusion, seed=1)
    X = sample_ensemble(AnalyticGmmDrift(N21, L1), L1, cfg, [0.0]).samples[:, 0]
    assert X.mean() == pytest.approx(2.0, abs=0.05)
    assert X.var() == pytest.approx(1.0, abs=0.06)


def test_intermediate_marginals_follow_interpolant():
    cfg = SamplerConfig(n_steps=200, ensemble_size=20000, seed=2)
    snaps = sample_path_marginals(AnalyticGmmDrift(N21, L1), L1, cfg, [0.0], [100])
    m = gmm_marginal(N21, L1, 0.5, [0.0])
    X = snaps[100][:, 0]
    assert X.mean() == pytest.approx(m.means[0, 0], abs=0.03)
    assert X.var() == pytest.approx(m.covs[0, 0, 0], rel=0.06)


def test_diffusion_choices_agree_in_law():
    spec = GmmSpec([0.4, 0.6], [[-1.5, 0.5], [1.0, -1.0]], [np.eye(2) * 0.4, [[0.6, 0.2], [0.2, 0.5]]])
    drift = AnalyticGmmDrift(spec, Q1)
    a = sample_ensemble(drift, Q1, SamplerConfig(ensemble_size=3000, seed=4), [0.3, 0.3]).samples
    b = sample_ensemble(drift, Q1, SamplerConfig(ensemble_size=3000, diffusion="follmer", seed=5), [0.3, 0.3]).samples
    assert energy_distance_test(a, b, n_permutations=200, max_points=1500) > 0.01


def test_member_stream_independent_of_ensemble_size():
    drift = AnalyticGmmDrift(N21, Q1)
    cfg = SamplerConfig(n_steps=20, ensemble_size=8, seed=9)
    full = sample_ensemble(drift, Q1, cfg, [0.5]).samples
    assert sample_one(drift, Q1, cfg, [0.5], member=5)[0] == full[5, 0]
    sub = sample_ensemble(drift, Q1, cfg, [0.5], members=[6, 2]).samples
    np.testing.assert_array_equal(sub, full[[6, 2]])


def test_same_seed_same_bytes():
    drift = AnalyticGmmDrift(N21, L1)
    cfg = SamplerConfig(n_steps=30, ensemble_size=50, diffusion="follmer", seed=7)
    a = sample_ensemble(drift, L1, cfg, [1.0]).samples
    b = sample_ensemble(drift, L1, cfg, [1.0]).samples
    assert a.tobytes() == b.tobytes()
    c = sample_ensemble(drift, L1, SamplerConfig(n_steps=30, ensemble_size=50, diffusion="follmer", seed=8), [1.0])
    assert not np.array_equal(a, c.samples)


def test_rollout_first_lag_equals_ensemble():
    drift = AnalyticGmmDrift(N21, Q1)
    cfg = SamplerConfig(n_steps=25, ensemble_size=10, seed=0)
    traj = rollout(drift, Q1, cfg, [0.2], steps=3)
    assert traj.shape == (3, 10, 1)
    np.testing.assert_array_equal(traj[0], sample_ensemble(drift, Q1, cfg, [0.2]).samples)
    with pytest.raises(DomainError):
        rollout(drift, Q1, cfg, [0.2], steps=0)


def _half_gaussian(x0):
    return GmmSpec([1.0], [0.5 * np.asarray(x0)], [0.1 * np.eye(1)])


def _half_gaussian_drift(x, x0, s):
    # closed-form E[R | I = x] for x1 ~ N(x0/2, 0.1) under the linear schedule
    mean_i = (1 - s) * x0 + 0.5 * s * x0
    # Cov(R, I) / Var(I) with the common factor s cancelled, so s=0 is fine
    gain = (0.1 - (1 - s)) / (0.1 * s + (1 - s) ** 2)
    return -0.5 * x0 + gain * (x - mean_i)


def test_closed_form_conditional_drift_matches_oracle():
    rng = np.random.default_rng(0)
    x, x0 = rng.normal(0, 2, (2, 7, 1))
    for s in (0.2, 0.7):
        np.testing.assert_allclose(_half_gaussian_drift(x, x0, s), AnalyticGmmDrift(_half_gaussian, L1)(x, x0, s), atol=1e-12)


def test_rollout_conditions_on_previous_output():
    cfg = SamplerConfig(n_steps=100, ensemble_size=20000, seed=1)
    traj = rollout(_half_gaussian_drift, L1, cfg, [4.0], steps=2)
    assert traj[0].mean() == pytest.approx(2.0, abs=0.02)
    assert traj[1].mean() == pytest.approx(1.0, abs=0.02)
    # Var = Var(x1 | x0) + Var(x0)/4 after one more lag
    assert traj[1].var() == pytest.approx(0.1 + 0.1 * 0.25, rel=0.06)


def test_config_validation():
    with pytest.raises(DomainError):
        SamplerConfig(n_steps=1)
    with pytest.raises(DomainError):
        SamplerConfig(grid=[0.0, 0.5, 0.9])
    with pytest.raises(DomainError):
        SamplerConfig(ensemble_size=0)
    with pytest.raises(ValueError):
        SamplerConfig(diffusion="nope")
    cfg = SamplerConfig(grid=[0.0, 0.1, 0.5, 1.0])
    assert cfg.n_steps == 3


def test_custom_nonuniform_grid_runs():
    grid = np.concatenate([np.linspace(0, 0.1, 51), np.linspace(0.1, 1, 101)[1:]])
    cfg = SamplerConfig(grid=grid, ensemble_size=20000, seed=6)
    X = sample_ensemble(AnalyticGmmDrift(N21, L1), L1, cfg, [0.0]).samples[:, 0]
    assert X.mean() == pytest.approx(2.0, abs=0.05)


def test_divergent_drift_reports_step():
    cfg = SamplerConfig(n_steps=50, ensemble_size=2)
    with pytest.raises(NumericalError) as err, np.errstate(over="ignore"):
        sample_ensemble(lambda x, x0, s: 1e200 * np.exp(x), L1, cfg, [0.0])
    assert "step" in err.value.location


def test_ensemble_save_load(tmp_path):
    ens = ForecastEnsemble(np.arange(6.0).reshape(3, 2), np.array([1.0, 2.0]), {"k": 1})
    ens.save(tmp_path / "e")
    back = ForecastEnsemble.load(tmp_path / "e.bin")
    np.testing.assert_array_equal(back.samples, ens.samples)
    np.testing.assert_array_equal(back.x0, ens.x0)
    assert back.provenance == {"k": 1}


def test_trapezoid_weights_integrate_polynomial():
    s = np.sort(np.random.default_rng(0).uniform(size=40))
    w = trapezoid_weights(s)
    assert w.sum() == pytest.approx(s[-1] - s[0])
    assert np.sum(w * (2 * s + 1)) == pytest.approx((s[-1] ** 2 + s[-1]) - (s[0] ** 2 + s[0]))


@pytest.mark.parametrize("sched", [L1, Q1])
def test_follmer_minimizes_path_kl_weight(sched):
    s = np.linspace(0.02, 0.98, 49)
    wf = path_kl_weight(sched, DiffusionSchedule(DiffusionKind.FOLLMER, sched), s)
    wm = path_kl_weight(sched, DiffusionSchedule(DiffusionKind.MATCH_SIGMA, sched), s)
    assert np.all(wf <= wm * (1 + 1e-12))
    # the weight is a function of g^2; perturbing g^F either way increases it
    table = np.linspace(0.0, 1.0, 101)
    gf = DiffusionSchedule(DiffusionKind.FOLLMER, sched)(table)
    for factor in (0.9, 1.1):
        custom = DiffusionSchedule(DiffusionKind.CUSTOM, sched, table, factor * gf)
        assert np.all(path_kl_weight(sched, custom, s) > wf)


def test_match_sigma_weight_closed_form():
    s = np.linspace(0.1, 0.9, 9)
    w = path_kl_weight(L1, DiffusionSchedule(DiffusionKind.MATCH_SIGMA, L1), s)
    np.testing.assert_allclose(w, 1 / (2 * (1 - s) ** 2))


def test_path_kl_constant_shift_is_exact_quadrature():
    spec = GmmSpec([0.5, 0.5], [[1.0, 0.0], [-1.0, 0.0]], [np.eye(2) * 0.5] * 2)
    b = AnalyticGmmDrift(spec, Q1)
    delta = np.array([0.2, -0.1])
    s = np.linspace(0.05, 0.95, 19)
    g = DiffusionSchedule(DiffusionKind.FOLLMER, Q1)
    est = path_kl(b, lambda x, x0, t: b(x, x0, t) + delta, Q1, g, spec, [0.0, 0.0], 200, s)
    exact = delta @ delta * np.sum(trapezoid_weights(s) * path_kl_weight(Q1, g, s))
    assert est.value == pytest.approx(exact, rel=1e-12)
    assert est.stderr == pytest.approx(0.0, abs=1e-12)


def test_path_kl_grid_must_be_interior():
    g = DiffusionSchedule(DiffusionKind.FOLLMER, L1)
    with pytest.raises(DomainError):
        path_kl(zero_drift, zero_drift, L1, g, N21, [0.0], 10, [0.0, 0.5])
    with pytest.raises(SingularityError):
        path_kl_weight(L1, DiffusionSchedule(DiffusionKind.MATCH_SIGMA, L1), [1.0])


@pytest.mark.parametrize("sched", [L1, Q1])
def test_reference_process_variance(sched):
    cfg = SamplerConfig(n_steps=200, seed=11)
    grid, mean, var = reference_process_check(sched, cfg, [0.0], 20000)
    v = eval_schedule(sched, grid)
    target = v.beta**2 + grid * v.sigma**2
    for i in (50, 100, 150, 200):
        se = target[i] * np.sqrt(2 / 19999)
        assert abs(var[i, 0] - target[i]) < 4 * se + 0.01 * target[i]
    np.testing.assert_allclose(mean[:, 0], 0.0, atol=0.05)


def test_refinement_reduces_bias():
    # terminal variance error of the oracle sampler shrinks as the grid is refined
    errs = []
    for n in (10, 80):
        cfg = SamplerConfig(n_steps=n, ensemble_size=40000, seed=12)
        X = sample_ensemble(AnalyticGmmDrift(N21, L1), L1, cfg, [0.0]).samples[:, 0]
        errs.append(abs(X.var() - 1.0))
    assert errs[1] < errs[0]
