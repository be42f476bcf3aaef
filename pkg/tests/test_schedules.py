import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from siforecast.errors import DomainError, SingularityError
from siforecast.schedules import (
    DiffusionKind,
    DiffusionSchedule,
    Schedule,
    ScheduleKind,
    TabulatedSchedule,
    coeff_A,
    coeff_c,
    eval_schedule,
    follmer_g,
    reference_rate,
    score_from_drift,
    transform_drift,
    validate_schedule,
)

L1 = Schedule.linear(1.0)
Q1 = Schedule.quadratic(1.0)
BUILTINS = [L1, Q1, Schedule.linear(2.0), Schedule.quadratic(0.5)]

interior = st.floats(min_value=0.01, max_value=0.99)
coord = st.floats(min_value=-10, max_value=10)
vec3 = st.lists(coord, min_size=3, max_size=3).map(np.array)


@pytest.mark.parametrize(
    "sched, s, expected",
    [
        (Q1, 0.0, (1, 0, 1, -1, 0, -1)),
        (Q1, 0.5, (0.5, 0.25, 0.5, -1, 1, -1)),
        (Schedule.linear(2.0), 0.5, (0.5, 0.5, 1.0, -1, 1, -2)),
    ],
)
def test_eval_schedule_examples(sched, s, expected):
    v = eval_schedule(sched, s)
    np.testing.assert_allclose([v.alpha, v.beta, v.sigma, v.alpha_dot, v.beta_dot, v.sigma_dot], expected, atol=1e-15)


@pytest.mark.parametrize("s", [-0.1, 1.1, np.nan])
def test_eval_schedule_rejects_out_of_range(s):
    with pytest.raises(DomainError):
        eval_schedule(L1, s)


@pytest.mark.parametrize("sched", BUILTINS)
def test_boundary_exactness(sched):
    v0, v1 = eval_schedule(sched, 0.0), eval_schedule(sched, 1.0)
    assert abs(v0.alpha - 1) < 1e-14 and abs(v0.beta) < 1e-14
    assert abs(v1.alpha) < 1e-14 and abs(v1.beta - 1) < 1e-14 and abs(v1.sigma) < 1e-14
    validate_schedule(sched)


def test_beta_dot_at_zero():
    assert eval_schedule(Q1, 0.0).beta_dot == 0.0
    assert eval_schedule(L1, 0.0).beta_dot == 1.0


def test_coeff_A_examples():
    assert coeff_A(L1, 0.5) == pytest.approx(4.0)
    assert coeff_A(Q1, 0.5) == pytest.approx(1 / (0.25 * 0.5 * 1.5))
    assert coeff_A(Schedule.linear(2.0), 0.5) == pytest.approx(1.0)


@given(interior, st.floats(min_value=0.1, max_value=3))
def test_coeff_A_closed_forms(s, eps):
    assert coeff_A(Schedule.linear(eps), s) == pytest.approx(1 / (eps**2 * s * (1 - s)), rel=1e-12)
    assert coeff_A(Schedule.quadratic(eps), s) == pytest.approx(1 / (eps**2 * s**2 * (1 - s) * (2 - s)), rel=1e-12)
    assert coeff_A(Schedule.quadratic(eps), s) > 0


@pytest.mark.parametrize("s", [0.0, 1.0])
def test_coeff_A_singular_at_endpoints(s):
    with pytest.raises(SingularityError):
        coeff_A(L1, s)


def test_coeff_c_examples():
    np.testing.assert_allclose(coeff_c(L1, 0.3, [2.0], [1.0]), [1.0])
    np.testing.assert_allclose(coeff_c(Q1, 0.5, [2.0], [0.0]), [2.0])
    np.testing.assert_allclose(coeff_c(Q1, 0.7, np.zeros(3), np.zeros(3)), np.zeros(3))


@given(interior, vec3, vec3)
def test_coeff_c_simplified_forms(s, x, x0):
    np.testing.assert_allclose(coeff_c(L1, s, x, x0), x - x0, atol=1e-12)
    np.testing.assert_allclose(coeff_c(Q1, s, x, x0), 2 * s * x - s * (2 - s) * x0, atol=1e-12)


def test_coeff_c_dimension_mismatch():
    with pytest.raises(DomainError):
        coeff_c(L1, 0.5, np.zeros(2), np.zeros(3))


def test_follmer_examples():
    assert follmer_g(Q1, 0.0) == pytest.approx(np.sqrt(3), abs=1e-7)
    assert follmer_g(L1, 0.0) == pytest.approx(1.0)
    assert follmer_g(L1, 1.0) == 0.0
    assert follmer_g(Q1, 1.0) == 0.0


@given(st.floats(min_value=0, max_value=1), st.floats(min_value=0.1, max_value=3))
def test_follmer_closed_forms(s, eps):
    assert follmer_g(Schedule.linear(eps), s) == pytest.approx(eps * np.sqrt((1 - s) * (1 + s)), abs=1e-12)
    assert follmer_g(Schedule.quadratic(eps), s) == pytest.approx(eps * np.sqrt((1 - s) * (3 - s)), abs=1e-12)


@pytest.mark.parametrize("sched", [L1, Q1])
def test_follmer_log_derivative_identity(sched):
    # |g|^2 = 2 s sigma^2 d/ds log(beta / (sqrt(s) sigma)), by central differences
    s = np.linspace(0.05, 0.95, 19)
    h = 1e-6

    def logr(t):
        v = eval_schedule(sched, t)
        return np.log(v.beta / (np.sqrt(t) * v.sigma))

    fd = (logr(s + h) - logr(s - h)) / (2 * h)
    sig = eval_schedule(sched, s).sigma
    np.testing.assert_allclose(follmer_g(sched, s) ** 2, 2 * s * sig**2 * fd, rtol=1e-5)


@pytest.mark.parametrize("sched", [L1, Q1])
def test_follmer_monotonicity_precondition(sched):
    s = np.linspace(1e-3, 1 - 1e-3, 2000)
    v = eval_schedule(sched, s)
    assert np.all(np.diff(v.beta / (np.sqrt(s) * v.sigma)) >= 0)


def test_score_from_drift_single_gaussian():
    # N(2,1) target, x0=0, s=0.5: m_bar=1, C_bar=0.375, exact drift at x=1 is 2
    assert score_from_drift(L1, np.array([2.0]), 0.5, np.array([1.0]), np.array([0.0]))[0] == pytest.approx(0.0, abs=1e-12)
    # at x=0 the exact drift is 2 + (0.5 - 0.25)/0.375 * (0 - 1) = 4/3
    b = 4.0 / 3.0
    assert score_from_drift(L1, np.array([b]), 0.5, np.array([0.0]), np.array([0.0]))[0] == pytest.approx(1 / 0.375)


def test_score_from_drift_monte_carlo():
    # MC oracle: E[z | I_s = x] = -sqrt(s) sigma * score; estimate E[z | I near x] by kernel weights
    rng = np.random.default_rng(0)
    n, s = 2_000_000, 0.5
    x1 = 2 + rng.standard_normal(n)
    z = rng.standard_normal(n)
    v = eval_schedule(L1, s)
    I = v.beta * x1 + np.sqrt(s) * v.sigma * z
    w = np.abs(I - 0.0) < 0.01
    ez = z[w].mean()
    score_mc = -ez / (np.sqrt(s) * v.sigma)
    assert score_mc == pytest.approx(1 / 0.375, abs=0.1)


@given(interior, vec3, vec3, st.sampled_from(BUILTINS))
def test_score_zero_at_c_over_beta(s, x, x0, sched):
    v = eval_schedule(sched, s)
    b = coeff_c(sched, s, x, x0) / v.beta
    np.testing.assert_allclose(score_from_drift(sched, b, s, x, x0), 0.0, atol=1e-8 * (1 + np.abs(b).max()) * coeff_A(sched, s))


def test_transform_drift_examples():
    F = DiffusionSchedule.follmer(L1)
    assert transform_drift(L1, F, np.array([2.0]), 0.5, np.array([1.0]), np.array([0.0]))[0] == pytest.approx(2.0)
    assert transform_drift(L1, F, np.array([0.0]), 0.5, np.array([1.0]), np.array([0.0]))[0] == pytest.approx(-1.0)


@given(interior, vec3, vec3, vec3)
def test_transform_drift_linear_follmer_closed_form(s, b, x, x0):
    out = transform_drift(L1, DiffusionSchedule.follmer(L1), b, s, x, x0)
    np.testing.assert_allclose(out, (1 + s) * b - x + x0, atol=1e-9)


@given(interior, vec3, vec3, vec3, st.sampled_from(BUILTINS))
def test_transform_identity_for_match_sigma(s, b, x, x0, sched):
    M = DiffusionSchedule.match_sigma(sched)
    np.testing.assert_array_equal(transform_drift(sched, M, b, s, x, x0), b)
    # a tabulated g equal to sigma is also the identity, up to rounding
    grid = np.linspace(0, 1, 401)
    tab = DiffusionSchedule(DiffusionKind.CUSTOM, sched, grid, eval_schedule(sched, grid).sigma)
    out = transform_drift(sched, tab, b, s, x, x0)
    np.testing.assert_allclose(out, b, atol=1e-3 * (1 + np.abs(b).max() + np.abs(x).max() + np.abs(x0).max()))


def test_transform_drift_rejects_s0():
    with pytest.raises(SingularityError):
        transform_drift(L1, DiffusionSchedule.follmer(L1), np.zeros(1), 0.0, np.zeros(1), np.zeros(1))


def _log_ratio(sched, s):
    v = eval_schedule(sched, s)
    return np.log((v.beta**2 + s * v.sigma**2) / v.beta)


@pytest.mark.parametrize("sched, s", [(L1, 0.5), (Q1, 0.9), (Q1, 0.3), (Schedule.linear(2.0), 0.2)])
def test_reference_rate_matches_log_derivative(sched, s):
    h = 1e-6
    fd = (_log_ratio(sched, s + h) - _log_ratio(sched, s - h)) / (2 * h)
    assert reference_rate(sched, s) == pytest.approx(fd, abs=1e-6)


@given(interior, st.sampled_from(BUILTINS))
def test_reference_rate_simplified_identity(s, sched):
    v = eval_schedule(sched, s)
    simplified = (2 * v.beta * v.beta_dot + 2 * s * v.sigma * v.sigma_dot + v.sigma**2) / (
        v.beta**2 + s * v.sigma**2
    ) - v.beta_dot / v.beta
    assert reference_rate(sched, s) == pytest.approx(simplified, rel=1e-10, abs=1e-10)


def test_reference_rate_singular():
    with pytest.raises(SingularityError):
        reference_rate(L1, 0.0)


def test_endpoint_limits_finite_for_match_and_linear_follmer():
    for g in (DiffusionSchedule.match_sigma(L1), DiffusionSchedule.match_sigma(Q1), DiffusionSchedule.follmer(L1)):
        near0, near1 = g.endpoint_limits()
        assert np.all(np.isfinite(near0)) and np.all(np.isfinite(near1))
        assert abs(near0[-1] - near0[-2]) < 1e-3
        assert abs(near1[-1] - near1[-2]) < 1e-3
    near0, _ = DiffusionSchedule.follmer(L1).endpoint_limits()
    assert near0[-1] == pytest.approx(2.0, abs=1e-4)


def test_endpoint_limit_quadratic_follmer_diverges_at_zero():
    # g^2 - sigma^2 = 2 eps^2 (1 - s) does not vanish at s=0, so the ratio grows like 2/s
    near0, near1 = DiffusionSchedule.follmer(Q1).endpoint_limits()
    h = np.geomspace(1e-2, 1e-2 * 2.0**-11, 12)
    np.testing.assert_allclose(near0 * h, 2 * (1 - h), rtol=1e-10)
    assert np.all(np.isfinite(near1))


def _tabulated(s_grid, beta, beta_dot):
    return TabulatedSchedule(s_grid, 1 - s_grid, -np.ones_like(s_grid), beta, beta_dot, 1 - s_grid, -np.ones_like(s_grid))


def test_custom_schedule_reproduces_builtin():
    g = np.linspace(0, 1, 11)
    custom = Schedule(ScheduleKind.CUSTOM, 1.0, _tabulated(g, g**2, 2 * g))
    s = np.linspace(0, 1, 97)
    a, b = eval_schedule(custom, s), eval_schedule(Q1, s)
    for u, w in zip(a, b):
        np.testing.assert_allclose(u, w, atol=1e-12)
    assert follmer_g(custom, 0.0) == pytest.approx(np.sqrt(3), rel=1e-6)


def test_custom_schedule_validation():
    g = np.linspace(0, 1, 11)
    with pytest.raises(DomainError):
        Schedule(ScheduleKind.CUSTOM, 1.0, _tabulated(g, g**2 + 0.1, 2 * g))
    with pytest.raises(DomainError):
        Schedule(ScheduleKind.CUSTOM, 1.0, _tabulated(g, 1 - g, -np.ones_like(g)))
    with pytest.raises(DomainError):
        Schedule(ScheduleKind.CUSTOM, 1.0)
    with pytest.raises(DomainError):
        Schedule.linear(0.0)


@settings(max_examples=30)
@given(interior, interior)
def test_follmer_dominates_sigma(s, eps):
    # the Follmer coefficient is never below sigma for the builtin schedules
    for sched in (Schedule.linear(eps + 0.1), Schedule.quadratic(eps + 0.1)):
        assert follmer_g(sched, s) >= eval_schedule(sched, s).sigma
