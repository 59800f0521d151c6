import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lmmpf.errors import ConfigError, NewtonDivergenceError, StiffnessError
from lmmpf.lmm import (
    StepHistory,
    adaptive_bdf_interval,
    batched_implicit_step,
    batched_propagation,
    explicit_step,
    fixed_step_trajectory,
    implicit_step,
    lte_estimate,
    make_integrator,
    parse_integrator,
    propagate_interval,
    scheme_coefficients,
    step_plan,
)
from lmmpf.models import DecayModel, FunctionModel, LinearModel, MetabolicModel

ALL = [f"{f}{q}" for f in ("ab", "am", "bdf") for q in (1, 2, 3)]


def decay(lam=-1.0):
    return LinearModel([[lam]])


def zero_model(d=2):
    return FunctionModel(lambda t, x, th: np.zeros_like(x),
                         lambda t, x, th: np.zeros(x.shape[:-1] + (x.shape[-1], x.shape[-1])), d)


# -- coefficients --------------------------------------------------------------------


def test_ab1_is_forward_euler():
    s = scheme_coefficients("AB", 1)
    assert s.beta == (0.0, 1.0) and not s.implicit


def test_ab2_coefficients():
    assert scheme_coefficients("AB", 2).beta == (0.0, 1.5, -0.5)


def test_bdf2_coefficients():
    s = scheme_coefficients("BDF", 2)
    assert s.alpha == pytest.approx((4 / 3, -1 / 3)) and s.beta == pytest.approx((2 / 3,))


def test_am1_bdf1_backward_euler_am2_trapezoid():
    am1, bdf1, am2 = scheme_coefficients("AM", 1), scheme_coefficients("BDF", 1), scheme_coefficients("AM", 2)
    assert am1.beta == (1.0,) and bdf1.alpha == (1.0,) and bdf1.beta == (1.0,)
    assert am2.beta == (0.5, 0.5)


def test_unsupported_order_and_family():
    with pytest.raises(ConfigError):
        scheme_coefficients("AB", 4)
    with pytest.raises(ConfigError):
        scheme_coefficients("RK", 2)
    with pytest.raises(ConfigError):
        parse_integrator("euler")


@pytest.mark.parametrize("name", ALL)
def test_implicit_flags(name):
    s = parse_integrator(name)
    assert s.implicit == (s.family != "AB")
    assert s.name == name


@pytest.mark.parametrize("name", ALL)
def test_exact_on_polynomials_up_to_order(name):
    # x' = q'(t) with q of degree = order is integrated exactly once the
    # history is full; start from exact history values
    s = parse_integrator(name)
    p = s.order
    q = lambda t: t ** p + 0.5 * t  # noqa: E731
    dq = lambda t: p * t ** (p - 1) + 0.5  # noqa: E731
    model = FunctionModel(lambda t, x, th: np.full_like(x, dq(t)),
                          lambda t, x, th: np.zeros(x.shape + x.shape[-1:]), 1)
    h, t = 0.1, 1.0
    hist = StepHistory()
    for k in range(3, -1, -1):
        tk = t - k * h
        hist.push(np.array([q(tk)]), np.array([dq(tk)]))
    if s.implicit:
        x = implicit_step(model, None, hist, t, h, s)
    else:
        x = explicit_step(model, None, hist, t, h, s)
    assert x[0] == pytest.approx(q(t + h), abs=1e-12)


# -- single steps ----------------------------------------------------------------------


def test_explicit_step_examples():
    m = zero_model(2)
    hist = StepHistory.start(np.array([1.0, 2.0]), np.zeros(2))
    assert np.array_equal(explicit_step(m, None, hist, 0.0, 0.1), [1.0, 2.0])
    const = FunctionModel(lambda t, x, th: np.ones_like(x), None, 1)
    hist = StepHistory()
    hist.push(np.array([-0.1]), np.array([1.0]))
    hist.push(np.array([0.0]), np.array([1.0]))
    assert explicit_step(const, None, hist, 0.0, 0.1, scheme_coefficients("AB", 2))[0] == pytest.approx(0.1)
    hist = StepHistory.start(np.array([1.0]), np.array([1.0]))
    assert explicit_step(decay(1.0), None, hist, 0.0, 0.05, scheme_coefficients("AB", 1))[0] == pytest.approx(1.05)


def test_explicit_step_rejects_implicit_scheme_and_bad_h():
    hist = StepHistory.start(np.array([1.0]), np.array([1.0]))
    with pytest.raises(ConfigError):
        explicit_step(decay(), None, hist, 0.0, 0.1, scheme_coefficients("AM", 1))
    with pytest.raises(ConfigError):
        explicit_step(decay(), None, hist, 0.0, -0.1)


def test_implicit_bdf1_closed_form():
    lam, h = -7.0, 0.1
    hist = StepHistory.start(np.array([2.0]), np.array([lam * 2.0]))
    x = implicit_step(decay(lam), None, hist, 0.0, h, scheme_coefficients("BDF", 1))
    assert x[0] == pytest.approx(2.0 / (1 - h * lam), rel=1e-12)


def test_implicit_zero_rhs():
    hist = StepHistory.start(np.array([3.0, 4.0]), np.zeros(2))
    x = implicit_step(zero_model(2), None, hist, 0.0, 0.1, scheme_coefficients("AM", 2))
    assert np.array_equal(x, [3.0, 4.0])


def test_am2_trapezoid_hand_value():
    hist = StepHistory.start(np.array([1.0]), np.array([-1.0]))
    x = implicit_step(decay(-1.0), None, hist, 0.0, 0.1, scheme_coefficients("AM", 2))
    assert x[0] == pytest.approx(0.95 / 1.05, abs=1e-12)


def test_implicit_step_rejects_explicit_scheme():
    hist = StepHistory.start(np.array([1.0]), np.array([1.0]))
    with pytest.raises(ConfigError):
        implicit_step(decay(), None, hist, 0.0, 0.1, scheme_coefficients("AB", 2))


def test_newton_divergence_reported():
    # x' = x^2 with a huge step has no nearby root
    m = FunctionModel(lambda t, x, th: x * x + 1.0, lambda t, x, th: np.diag(2 * x), 1)
    hist = StepHistory.start(np.array([1.0]), np.array([2.0]))
    with pytest.raises(NewtonDivergenceError) as info:
        implicit_step(m, None, hist, 0.0, 5.0, scheme_coefficients("BDF", 1), max_iter=5)
    assert info.value.last_iterate is not None


# -- local error estimates ----------------------------------------------------------------


@pytest.mark.parametrize("name", ["am2", "bdf2", "am3"])
def test_lte_zero_when_predictor_equals_corrector(name):
    s = parse_integrator(name)
    x = np.array([1.0, -2.0])
    assert np.array_equal(lte_estimate(s, x, x), np.zeros(2))


def test_lte_ab_needs_aux():
    with pytest.raises(ConfigError):
        lte_estimate(parse_integrator("ab2"), np.ones(1), np.ones(1))
    assert lte_estimate(parse_integrator("ab2"), None, np.ones(1), aux=np.zeros(1))[0] == 1.0


def test_lte_zero_on_linear_solution():
    # x' = 1: every scheme is exact, so every estimate vanishes
    m = FunctionModel(lambda t, x, th: np.ones_like(x), lambda t, x, th: np.zeros((1, 1)), 1)
    for name in ALL:
        _, gamma = fixed_step_trajectory(m, None, np.array([0.0]), 0.0, 0.1, 6, parse_integrator(name))
        assert gamma[0] == pytest.approx(0.0, abs=1e-28), name


def test_lte_bdf1_within_factor_three_of_true_error():
    lam, h = -10.0, 0.01
    x0 = 1.0
    states, gamma = fixed_step_trajectory(decay(lam), None, np.array([x0]), 0.0, h, 1, parse_integrator("bdf1"))
    est = math.sqrt(gamma[0])
    true = abs(x0 * math.exp(lam * h) - states[1][0])
    assert true / 3 <= est <= 3 * true


def test_step_plans_ramp_up():
    assert step_plan(parse_integrator("bdf2"), 1).order == 1
    assert step_plan(parse_integrator("bdf2"), 2).order == 2
    assert step_plan(parse_integrator("am3"), 1).order == 2
    assert step_plan(parse_integrator("am3"), 2).order == 3
    assert step_plan(parse_integrator("ab3"), 1).heun
    assert step_plan(parse_integrator("bdf3"), 1).order == 2


# -- intervals ------------------------------------------------------------------------------


@pytest.mark.parametrize("name", ALL)
def test_zero_rhs_interval(name):
    res = propagate_interval(zero_model(3), None, np.array([1.0, 2.0, 3.0]), 0.0, 1.0, 0.25, parse_integrator(name))
    assert np.array_equal(res.state, [1.0, 2.0, 3.0])
    assert np.array_equal(res.gamma_diag, np.zeros(3))
    assert res.steps_taken == 4


def test_bdf2_exp_decay():
    res = propagate_interval(decay(-1.0), None, np.array([1.0]), 0.0, 1.0, 0.01, parse_integrator("bdf2"))
    assert abs(res.state[0] - 0.36788) <= 5e-4


@pytest.mark.parametrize("name", ALL)
def test_convergence_slopes(name):
    s = parse_integrator(name)
    hs = np.array([0.1, 0.05, 0.025, 0.0125])
    errs = [abs(propagate_interval(decay(-1.0), None, np.array([1.0]), 0.0, 1.0, h, s).state[0] - math.exp(-1))
            for h in hs]
    slope = np.polyfit(np.log(hs), np.log(errs), 1)[0]
    assert abs(slope - s.order) <= 0.25


def test_gamma_decreases_with_h_on_metabolic():
    m = MetabolicModel()
    th = np.array([2.0, 0.5, 1.0, 0.8])
    x0 = np.array([0.5, 1.0, 1.0])
    for name in ("bdf2", "am2", "ab2"):
        g = [propagate_interval(m, th, x0, 1.8, 3.0, h, parse_integrator(name)).gamma_diag for h in (0.1, 0.05, 0.025)]
        assert np.all(g[1] < g[0]) and np.all(g[2] < g[1]), name


def test_interval_must_be_multiple_of_h():
    with pytest.raises(ConfigError):
        propagate_interval(decay(), None, np.array([1.0]), 0.0, 1.0, 0.3, parse_integrator("bdf1"))
    with pytest.raises(ConfigError):
        propagate_interval(decay(), None, np.array([1.0]), 1.0, 1.0, 0.1, parse_integrator("bdf1"))


def test_metabolic_positivity_with_slack():
    m = MetabolicModel()
    rng = np.random.default_rng(0)
    for _ in range(10):
        th = np.exp(rng.normal(0, 0.7, 4))
        x0 = rng.uniform(0, 2, 3)
        states, _ = fixed_step_trajectory(m, th, x0, 0.0, 0.05, 200, parse_integrator("bdf2"))
        assert states.min() >= -10 * 1e-9


# -- stiffness ----------------------------------------------------------------------------------


@pytest.mark.parametrize("name", ["bdf1", "bdf2", "am1"])
def test_stiff_implicit_nonincreasing(name):
    states, _ = fixed_step_trajectory(decay(-1e4), None, np.array([1.0]), 0.0, 0.05, 100, parse_integrator(name))
    mag = np.abs(states[:, 0])
    # monotone up to round-off relative to the starting magnitude
    assert np.all(mag[1:] <= mag[:-1] + np.finfo(float).eps * mag[0])


def test_stiff_ab2_blows_up():
    with np.errstate(over="ignore", invalid="ignore"):
        states, _ = fixed_step_trajectory(decay(-1e4), None, np.array([1.0]), 0.0, 0.05, 100, parse_integrator("ab2"))
    assert np.nanmax(np.abs(states)) > 1e6


# -- adaptive --------------------------------------------------------------------------------------


def test_adaptive_gamma_rule():
    res = adaptive_bdf_interval(decay(-3.0), None, np.array([1.0]), 0.0, 1.0, 1e-3)
    assert np.all(res.gamma_diag == 1e-3 * res.steps_taken)
    assert abs(res.state[0] - math.exp(-3)) < 1e-2


def test_adaptive_zero_rhs_single_step():
    res = adaptive_bdf_interval(zero_model(2), None, np.array([1.0, 5.0]), 0.0, 2.0, 1e-3)
    assert np.array_equal(res.state, [1.0, 5.0]) and res.steps_taken == 1


def test_adaptive_stiff_decay():
    res = adaptive_bdf_interval(decay(-1e4), None, np.array([1.0]), 0.0, 1.0, 1e-3)
    assert abs(res.state[0]) < 1e-4


def test_adaptive_rejects_bad_input():
    with pytest.raises(ConfigError):
        adaptive_bdf_interval(decay(), None, np.array([1.0]), 0.0, 1.0, 0.0)
    with pytest.raises(ConfigError):
        adaptive_bdf_interval(decay(), None, np.array([1.0]), 1.0, 0.5, 1e-3)


def test_adaptive_stiffness_failure():
    # a finite-time blow-up forces the step size to underflow
    m = FunctionModel(lambda t, x, th: x * x, lambda t, x, th: np.diag(2 * x), 1)
    with pytest.raises(StiffnessError):
        adaptive_bdf_interval(m, None, np.array([1.0]), 0.0, 2.0, 1e-6)


def test_make_integrator():
    assert make_integrator("adaptive-bdf2", rtol=1e-4).adaptive
    fixed = make_integrator("bdf2", h=0.05)
    assert fixed.name == "bdf2" and fixed.h == 0.05
    with pytest.raises(ConfigError):
        make_integrator("bdf2")


# -- batched ----------------------------------------------------------------------------------------


def _random_metabolic(rng, N):
    th = np.exp(rng.normal(0, 0.8, (N, 4)))
    X = rng.uniform(0.1, 3, (N, 3))
    return th, X


def _history(model, thetas, X, t, h, steps, scheme):
    # build a batched history by taking a few batched steps
    res = [fixed_step_trajectory(model, thetas[i], X[i], t, h, steps, scheme) for i in range(len(X))]
    hist = StepHistory()
    for k in range(steps + 1):
        xs = np.array([r[0][k] for r in res])
        fs = model.rhs(t + k * h, xs, thetas)
        hist.push(xs, fs)
    return hist


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(["am1", "am2", "am3", "bdf1", "bdf2", "bdf3"]),
       st.integers(0, 3))
def test_batched_implicit_step_bitwise(seed, name, steps):
    rng = np.random.default_rng(seed)
    N = int(rng.integers(1, 17))
    m = MetabolicModel()
    th, X = _random_metabolic(rng, N)
    s = parse_integrator(name)
    hist = _history(m, th, X, 0.0, 0.05, steps, s)
    Xb, ok = batched_implicit_step(m, th, hist, steps * 0.05, 0.05, s)
    for i in range(N):
        hi = StepHistory()
        for x, f in zip(reversed(hist.states), reversed(hist.fvals)):
            hi.push(x[i], f[i])
        if not ok[i]:
            continue
        xi = implicit_step(m, th[i], hi, steps * 0.05, 0.05, s)
        assert np.array_equal(xi, Xb[i])


def test_batched_linear_converges_in_one_iteration():
    from lmmpf.lmm import batched_newton

    m = DecayModel()
    th = np.array([[1.0], [5.0], [50.0]])
    bound = m.bind(th)
    X0 = np.ones((3, 1))
    X, ok, its = batched_newton(bound, 0.1, X0, 0.1, X0, np.ones(3, bool))
    assert ok.all() and its == 1
    assert np.allclose(X[:, 0], 1 / (1 + 0.1 * th[:, 0]))


@pytest.mark.parametrize("name", ALL)
def test_batched_propagation_bitwise(name):
    rng = np.random.default_rng(1)
    m = MetabolicModel()
    th, X = _random_metabolic(rng, 8)
    s = parse_integrator(name)
    b = batched_propagation(m, th, X, 1.6, 2.0, 0.05, s)
    for i in range(8):
        r = propagate_interval(m, th[i], X[i], 1.6, 2.0, 0.05, s)
        assert np.array_equal(r.state, b.states[i])
        assert np.array_equal(r.gamma_diag, b.gamma[i])


def test_batched_single_particle_equals_interval():
    m = MetabolicModel()
    th = np.array([[2.0, 0.5, 1.0, 0.8]])
    X = np.array([[0.5, 1.0, 1.0]])
    s = parse_integrator("bdf2")
    b = batched_propagation(m, th, X, 0.0, 0.2, 0.05, s)
    r = propagate_interval(m, th[0], X[0], 0.0, 0.2, 0.05, s)
    assert np.array_equal(b.states[0], r.state)
