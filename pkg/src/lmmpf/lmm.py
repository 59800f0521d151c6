"""Fixed-step linear multistep integrators with local error estimates.

Adams-Bashforth, Adams-Moulton and BDF schemes of orders 1-3.  Implicit
steps are solved by Newton iteration on ``I - h*beta0*J``; every step also
produces a per-component local truncation error estimate, and the squared
estimates summed over an interval form the innovation variance used by the
particle filter.

Multistep history is restarted at the beginning of every interval.  The
first steps therefore run at reduced order; third-order schemes take their
first step with a one-step second-order starter (trapezoidal rule for the
implicit families, Heun for Adams-Bashforth) so that the start-up error does
not spoil their global order.

Single-particle and batched paths share every elementwise formula, so a
particle's trajectory is bitwise identical in both.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    ConfigError,
    NewtonDivergenceError,
    ParticleInvalidError,
    SingularBlockError,
    StiffnessError,
)
from .linalg import block_diag_solve

NEWTON_TOL = 1e-9
NEWTON_MAX_ITER = 20

# coefficients on f_n, f_{n-1}, ...
AB_BETA = {
    1: (1.0,),
    2: (3 / 2, -1 / 2),
    3: (23 / 12, -16 / 12, 5 / 12),
    4: (55 / 24, -59 / 24, 37 / 24, -9 / 24),
}
AB_ERR = {1: 1 / 2, 2: 5 / 12, 3: 3 / 8, 4: 251 / 720}
# coefficients on f_{n+1}, f_n, f_{n-1}
AM_BETA = {1: (1.0,), 2: (1 / 2, 1 / 2), 3: (5 / 12, 8 / 12, -1 / 12)}
AM_ERR = {1: -1 / 2, 2: -1 / 12, 3: -1 / 24}
# coefficients on x_n, x_{n-1}, ...
BDF_ALPHA = {1: (1.0,), 2: (4 / 3, -1 / 3), 3: (18 / 11, -9 / 11, 2 / 11)}
BDF_BETA0 = {1: 1.0, 2: 2 / 3, 3: 6 / 11}
BDF_ERR = {1: -1 / 2, 2: -2 / 9, 3: -3 / 22}
# polynomial extrapolation through q+1 equally spaced states
EXTRAP_ALPHA = {1: (2.0, -1.0), 2: (3.0, -3.0, 1.0), 3: (4.0, -6.0, 4.0, -1.0)}

FAMILIES = ("AB", "AM", "BDF")


@dataclass(frozen=True)
class LmmScheme:
    """Coefficients of ``x_{n+1} = sum alpha_i x_{n-i} + h sum beta_i f_{n+1-i}``.

    ``beta[0]`` is the implicit weight (zero for Adams-Bashforth).
    ``error_const`` is ``C`` in ``x(t+h) - x_{n+1} ~ C h^{p+1} x^{(p+1)}``.
    """

    family: str
    order: int
    alpha: tuple
    beta: tuple
    error_const: float

    @property
    def implicit(self) -> bool:
        return self.beta[0] != 0.0

    @property
    def name(self) -> str:
        return f"{self.family.lower()}{self.order}"


def scheme_coefficients(family: str, order: int) -> LmmScheme:
    family = family.upper()
    if family not in FAMILIES:
        raise ConfigError(f"unknown LMM family {family!r}")
    if order not in (1, 2, 3):
        raise ConfigError(f"unsupported order {order}; expected 1, 2 or 3")
    if family == "AB":
        return LmmScheme("AB", order, (1.0,), (0.0,) + AB_BETA[order], AB_ERR[order])
    if family == "AM":
        return LmmScheme("AM", order, (1.0,), AM_BETA[order], AM_ERR[order])
    return LmmScheme("BDF", order, BDF_ALPHA[order], (BDF_BETA0[order],), BDF_ERR[order])


def parse_integrator(name: str) -> LmmScheme:
    """``"bdf2"`` -> BDF order 2, etc."""
    key = name.strip().lower()
    for fam in FAMILIES:
        f = fam.lower()
        if key.startswith(f) and key[len(f):].isdigit():
            return scheme_coefficients(fam, int(key[len(f):]))
    raise ConfigError(f"unknown integrator {name!r}")


# -- step plans ----------------------------------------------------------------


@dataclass(frozen=True)
class StepPlan:
    """What one step does given how much history is available.

    The corrector is ``sum alpha_i x_{n-i} + h sum beta_i f_{n-i}`` plus, for
    implicit steps, ``h*beta0*f(x_{n+1})``.  The predictor has the same form
    without the implicit term.  ``lte`` selects the error estimate:

    ``"ratio"``  ``|factor * (corrector - predictor)|``
    ``"aux"``    ``|corrector - aux|`` with ``aux`` a higher-order explicit step
    ``"heun"``   ``|h/2 (f(x_{n+1}) - f_n)|``
    """

    order: int
    beta0: float
    alpha: tuple
    beta: tuple
    pred_alpha: tuple
    pred_beta: tuple
    lte: str
    factor: float = 1.0
    aux_beta: tuple = ()
    heun: bool = False

    @property
    def implicit(self) -> bool:
        return self.beta0 != 0.0


def _ratio(kc, kp):
    return kc / (kp - kc)


def step_plan(scheme: LmmScheme, filled: int) -> StepPlan:
    """Plan the next step of ``scheme`` with ``filled`` stored states."""
    p = scheme.order
    fam = scheme.family
    if fam == "AB":
        if p == 3 and filled == 1:
            return StepPlan(2, 0.0, (1.0,), (1.0,), (1.0,), (1.0,), "ratio", 1.0, heun=True)
        q = min(p, filled)
        if filled >= q + 1:
            return StepPlan(q, 0.0, (1.0,), AB_BETA[q], (), (), "aux", aux_beta=AB_BETA[q + 1])
        if q >= 2:
            return StepPlan(q, 0.0, (1.0,), AB_BETA[q], (1.0,), AB_BETA[q - 1], "ratio", 1.0)
        return StepPlan(1, 0.0, (1.0,), AB_BETA[1], (), (), "heun")
    if fam == "AM":
        q = min(p, filled + 1)
        beta = AM_BETA[q]
        if filled >= q:
            return StepPlan(q, beta[0], (1.0,), beta[1:], (1.0,), AB_BETA[q], "ratio",
                            _ratio(AM_ERR[q], AB_ERR[q]))
        return StepPlan(q, beta[0], (1.0,), beta[1:], (1.0,), AB_BETA[filled], "ratio", 1.0)
    # BDF
    if p == 3 and filled == 1:
        beta = AM_BETA[2]
        return StepPlan(2, beta[0], (1.0,), beta[1:], (1.0,), AB_BETA[1], "ratio", 1.0)
    q = min(p, filled)
    if filled >= q + 1:
        return StepPlan(q, BDF_BETA0[q], BDF_ALPHA[q], (), EXTRAP_ALPHA[q], (), "ratio",
                        _ratio(BDF_ERR[q], 1.0))
    return StepPlan(q, BDF_BETA0[q], BDF_ALPHA[q], (), (1.0,), AB_BETA[q], "ratio",
                    _ratio(BDF_ERR[q], AB_ERR[q]))


# -- history -------------------------------------------------------------------


@dataclass
class StepHistory:
    """Most-recent-first states and right-hand sides (one extra slot for AB error control)."""

    states: deque = field(default_factory=lambda: deque(maxlen=4))
    fvals: deque = field(default_factory=lambda: deque(maxlen=4))

    @property
    def filled(self) -> int:
        return len(self.states)

    def push(self, x, f):
        self.states.appendleft(x)
        self.fvals.appendleft(f)

    @classmethod
    def start(cls, x0, f0) -> "StepHistory":
        hist = cls()
        hist.push(x0, f0)
        return hist


def _combine(coefs, arrays):
    acc = None
    for c, a in zip(coefs, arrays):
        if c == 0.0:
            continue
        term = c * a
        acc = term if acc is None else acc + term
    return acc


def _explicit_value(alpha, beta, hist: StepHistory, h):
    xs = _combine(alpha, hist.states)
    fs = _combine(beta, hist.fvals)
    if xs is None:
        xs = np.zeros_like(hist.states[0])
    if fs is None:
        return xs
    return xs + h * fs


def lte_estimate(plan_or_scheme, predictor, corrector, aux=None, factor=None):
    """Per-component absolute local error estimate (always nonnegative).

    With a :class:`StepPlan`, the plan decides the formula.  With an
    :class:`LmmScheme`, the matched-order ratio of error constants is used
    (predictor assumed to be the same-order Adams-Bashforth step for AM,
    the extrapolation predictor for BDF); for AB schemes ``aux`` must be the
    next-higher-order AB step.
    """
    predictor = np.asarray(predictor, dtype=float)
    corrector = np.asarray(corrector, dtype=float)
    if isinstance(plan_or_scheme, LmmScheme):
        s = plan_or_scheme
        if s.family == "AB":
            if aux is None:
                raise ConfigError("AB error estimate needs the higher-order step in aux")
            return np.abs(corrector - np.asarray(aux, dtype=float))
        if factor is None:
            kp = AB_ERR[s.order] if s.family == "AM" else 1.0
            factor = _ratio(s.error_const, kp)
        return np.abs(factor * (corrector - predictor))
    plan = plan_or_scheme
    if plan.lte == "aux":
        return np.abs(corrector - aux)
    return np.abs(plan.factor * (corrector - predictor))


# -- results -------------------------------------------------------------------


@dataclass
class PropagationResult:
    state: np.ndarray
    gamma_diag: np.ndarray
    steps_taken: int
    newton_failures: int = 0


@dataclass
class BatchPropagation:
    states: np.ndarray
    gamma: np.ndarray
    ok: np.ndarray
    steps_taken: int
    newton_iterations: int = 0


# -- single-particle stepping ----------------------------------------------------


def _check_finite(f, what="right-hand side"):
    if not np.all(np.isfinite(f)):
        raise ParticleInvalidError(f"non-finite {what} evaluation")


def newton_solve(bound, t1, known, hb0, guess, tol=NEWTON_TOL, max_iter=NEWTON_MAX_ITER):
    """Solve ``x - hb0 f(t1, x) = known`` for one particle.

    Returns ``(x, iterations)``.  Linear systems stop after one update, which
    is exact up to round-off.
    """
    x = guess
    linear = bound.model.linear
    for it in range(1, max_iter + 1):
        F = bound.rhs(t1, x)
        _check_finite(F)
        G = x - hb0 * F - known
        M = bound.iteration_matrix(t1, x, hb0)
        dx = block_diag_solve(M, -G)
        x = x + dx
        if not np.all(np.isfinite(x)):
            raise NewtonDivergenceError("Newton iterate became non-finite", last_iterate=x)
        if linear or np.max(np.abs(dx)) <= tol * (1.0 + np.max(np.abs(x))):
            return x, it
    raise NewtonDivergenceError(f"Newton did not converge in {max_iter} iterations", last_iterate=x)


def _take_step(bound, hist: StepHistory, t, h, plan: StepPlan, tol, max_iter):
    """One step for a single particle; returns ``(x_new, f_new, lte)``."""
    t1 = t + h
    fn = hist.fvals[0]
    if plan.heun:
        xp = hist.states[0] + h * fn
        fp = bound.rhs(t1, xp)
        _check_finite(fp)
        x_new = hist.states[0] + (0.5 * h) * (fn + fp)
        xpred = xp
    elif plan.implicit:
        known = _explicit_value(plan.alpha, plan.beta, hist, h)
        xpred = _explicit_value(plan.pred_alpha, plan.pred_beta, hist, h)
        x_new, _ = newton_solve(bound, t1, known, h * plan.beta0, xpred, tol, max_iter)
    else:
        x_new = _explicit_value(plan.alpha, plan.beta, hist, h)
        xpred = _explicit_value(plan.pred_alpha, plan.pred_beta, hist, h) if plan.pred_alpha else None
    f_new = bound.rhs(t1, x_new)
    _check_finite(f_new)
    if plan.lte == "aux":
        aux = _explicit_value((1.0,), plan.aux_beta, hist, h)
        lte = np.abs(x_new - aux)
    elif plan.lte == "heun":
        lte = np.abs((0.5 * h) * (f_new - fn))
    else:
        lte = np.abs(plan.factor * (x_new - xpred))
    return x_new, f_new, lte


def explicit_step(model, theta, hist: StepHistory, t, h, scheme: LmmScheme | None = None):
    """One Adams-Bashforth step of the scheme's order (reduced while history is short)."""
    if h <= 0:
        raise ConfigError("step size must be positive")
    scheme = scheme or scheme_coefficients("AB", min(hist.filled, 3))
    if scheme.implicit:
        raise ConfigError("explicit_step needs an Adams-Bashforth scheme")
    q = min(scheme.order, hist.filled)
    _check_finite(hist.fvals[0])
    return _explicit_value((1.0,), AB_BETA[q], hist, h)


def implicit_step(model, theta, hist: StepHistory, t, h, scheme: LmmScheme,
                  tol=NEWTON_TOL, max_iter=NEWTON_MAX_ITER, bound=None):
    """One implicit (AM or BDF) step solved by Newton iteration."""
    if not scheme.implicit:
        raise ConfigError("implicit_step needs an AM or BDF scheme")
    bound = bound or model.bind(theta)
    plan = step_plan(scheme, hist.filled)
    known = _explicit_value(plan.alpha, plan.beta, hist, h)
    xpred = _explicit_value(plan.pred_alpha, plan.pred_beta, hist, h)
    x_new, _ = newton_solve(bound, t + h, known, h * plan.beta0, xpred, tol, max_iter)
    return x_new


def _n_steps(t0, t1, h):
    if not t1 > t0:
        raise ConfigError("interval end must exceed its start")
    if h <= 0:
        raise ConfigError("step size must be positive")
    ratio = (t1 - t0) / h
    n = round(ratio)
    if n < 1 or abs(ratio - n) > 1e-9 * max(1.0, ratio):
        raise ConfigError(f"interval length {t1 - t0} is not an integer multiple of h={h}")
    return n


def fixed_step_trajectory(model, theta, x0, t0, h, n_steps, scheme: LmmScheme,
                          tol=NEWTON_TOL, max_iter=NEWTON_MAX_ITER, bound=None):
    """Take ``n_steps`` steps from ``x0``; returns ``(states, gamma_diag)``.

    ``states`` has ``n_steps + 1`` rows including ``x0``.
    """
    bound = bound or model.bind(theta)
    x0 = np.asarray(x0, dtype=float)
    f0 = bound.rhs(t0, x0)
    _check_finite(f0)
    hist = StepHistory.start(x0, f0)
    gamma = np.zeros_like(x0)
    out = [x0]
    for k in range(n_steps):
        t = t0 + k * h
        plan = step_plan(scheme, hist.filled)
        x_new, f_new, lte = _take_step(bound, hist, t, h, plan, tol, max_iter)
        gamma = gamma + lte * lte
        hist.push(x_new, f_new)
        out.append(x_new)
    return np.array(out), gamma


def propagate_interval(model, theta, x0, t0, t1, h, scheme: LmmScheme,
                       tol=NEWTON_TOL, max_iter=NEWTON_MAX_ITER, bound=None) -> PropagationResult:
    """Integrate one particle from ``t0`` to ``t1`` with fixed steps of ``h``.

    ``gamma_diag`` is the componentwise sum of squared local error estimates.
    """
    n = _n_steps(t0, t1, h)
    states, gamma = fixed_step_trajectory(model, theta, x0, t0, h, n, scheme, tol, max_iter, bound)
    return PropagationResult(states[-1], gamma, n)


# -- batched stepping ------------------------------------------------------------


def batched_newton(bound, t1, known, hb0, guess, active, tol=NEWTON_TOL, max_iter=NEWTON_MAX_ITER):
    """Newton iteration for all particles at once on the aggregate block-diagonal matrix.

    ``active`` is a boolean mask of particles to solve.  Converged particles
    leave the iteration.  Returns ``(X, ok, iterations)`` where ``ok`` flags
    particles that converged.
    """
    X = np.array(guess, dtype=float, copy=True)
    ok = np.zeros(X.shape[0], dtype=bool)
    todo = np.flatnonzero(active)
    linear = bound.model.linear
    iterations = 0
    for _ in range(max_iter):
        if todo.size == 0:
            break
        iterations += 1
        Xa = X[todo]
        F = bound.rhs(t1, Xa, idx=todo)
        finite = np.isfinite(F).all(axis=1)
        if not finite.all():
            todo = todo[finite]
            Xa = Xa[finite]
            F = F[finite]
            if todo.size == 0:
                break
        G = Xa - hb0 * F - known[todo]
        M = bound.iteration_matrix(t1, Xa, hb0, idx=todo)
        try:
            dX = block_diag_solve(M, -G)
            good = np.ones(todo.size, dtype=bool)
        except SingularBlockError as exc:
            dX = exc.solution
            good = np.ones(todo.size, dtype=bool)
            good[exc.blocks] = False
        Xn = Xa + dX
        X[todo[good]] = Xn[good]
        good &= np.isfinite(Xn).all(axis=1)
        if linear:
            conv = good
        else:
            step = np.max(np.abs(dX), axis=1)
            size = np.max(np.abs(Xn), axis=1)
            conv = good & (step <= tol * (1.0 + size))
        ok[todo[conv]] = True
        todo = todo[good & ~conv]
    return X, ok, iterations


def batched_implicit_step(model, thetas, hists: StepHistory, t, h, scheme: LmmScheme,
                          tol=NEWTON_TOL, max_iter=NEWTON_MAX_ITER, bound=None, active=None):
    """One implicit step for N particles whose histories are stacked ``(N, d)`` arrays.

    Returns ``(X, ok)``; particles that fail keep their last iterate and ``ok`` False.
    """
    if not scheme.implicit:
        raise ConfigError("batched_implicit_step needs an AM or BDF scheme")
    bound = bound or model.bind(np.asarray(thetas, dtype=float))
    plan = step_plan(scheme, hists.filled)
    known = _explicit_value(plan.alpha, plan.beta, hists, h)
    xpred = _explicit_value(plan.pred_alpha, plan.pred_beta, hists, h)
    n = xpred.shape[0]
    if active is None:
        active = np.ones(n, dtype=bool)
    X, ok, _ = batched_newton(bound, t + h, known, h * plan.beta0, xpred, active, tol, max_iter)
    return X, ok


def batched_propagation(model, thetas, X0, t0, t1, h, scheme: LmmScheme,
                        tol=NEWTON_TOL, max_iter=NEWTON_MAX_ITER, bound=None) -> BatchPropagation:
    """Propagate all particles over ``[t0, t1]`` as one stacked system.

    Explicit schemes only evaluate stacked right-hand sides; implicit schemes
    run :func:`batched_newton`.  Failed particles are flagged in ``ok`` and
    frozen at their last valid state.
    """
    n_steps = _n_steps(t0, t1, h)
    X0 = np.asarray(X0, dtype=float)
    bound = bound or model.bind(np.asarray(thetas, dtype=float))
    N = X0.shape[0]
    F0 = bound.rhs(t0, X0)
    ok = np.isfinite(F0).all(axis=1)
    F0 = np.where(ok[:, None], F0, 0.0)
    hist = StepHistory.start(X0.copy(), F0)
    gamma = np.zeros_like(X0)
    iterations = 0
    for k in range(n_steps):
        t = t0 + k * h
        t1k = t + h
        plan = step_plan(scheme, hist.filled)
        fn = hist.fvals[0]
        xcur = hist.states[0]
        if plan.heun:
            xpred = xcur + h * fn
            fp = bound.rhs(t1k, xpred)
            ok &= np.isfinite(fp).all(axis=1)
            fp = np.where(ok[:, None], fp, 0.0)
            x_new = xcur + (0.5 * h) * (fn + fp)
        elif plan.implicit:
            known = _explicit_value(plan.alpha, plan.beta, hist, h)
            xpred = _explicit_value(plan.pred_alpha, plan.pred_beta, hist, h)
            x_new, conv, its = batched_newton(bound, t1k, known, h * plan.beta0, xpred, ok, tol, max_iter)
            iterations += its
            ok &= conv
        else:
            x_new = _explicit_value(plan.alpha, plan.beta, hist, h)
            xpred = _explicit_value(plan.pred_alpha, plan.pred_beta, hist, h) if plan.pred_alpha else None
        x_new = np.where(ok[:, None], x_new, xcur)
        f_new = bound.rhs(t1k, x_new)
        ok &= np.isfinite(f_new).all(axis=1)
        f_new = np.where(ok[:, None], f_new, 0.0)
        if plan.lte == "aux":
            lte = np.abs(x_new - _explicit_value((1.0,), plan.aux_beta, hist, h))
        elif plan.lte == "heun":
            lte = np.abs((0.5 * h) * (f_new - fn))
        else:
            lte = np.abs(plan.factor * (x_new - xpred))
        gamma = gamma + np.where(ok[:, None], lte * lte, 0.0)
        hist.push(x_new, f_new)
    return BatchPropagation(hist.states[0], gamma, ok, n_steps, iterations)


# -- adaptive BDF(1,2) -----------------------------------------------------------

_SAFETY = 0.9
_MIN_FACTOR = 0.25
_MAX_FACTOR = 4.0
# |x_true - x_pred| constant of the Hermite predictor, and the BDF2 constant
_HERMITE_ERR = 1 / 3
_BDF2_FACTOR = _ratio(BDF_ERR[2], _HERMITE_ERR)
_BDF1_FACTOR = _ratio(BDF_ERR[1], AB_ERR[1])


def adaptive_bdf_interval(model, theta, x0, t0, t1, rtol, tol=NEWTON_TOL,
                          max_iter=NEWTON_MAX_ITER, bound=None, h0=None) -> PropagationResult:
    """Variable-step BDF of order at most 2 over ``[t0, t1]``.

    A step is accepted when ``max|lte| <= rtol * (1 + max|x|)``; the next step
    is ``0.9 h err^(-1/(p+1))`` clipped to ``[h/4, 4h]``.  The innovation
    variance reported for every component is ``rtol * steps_taken``.
    """
    if rtol <= 0:
        raise ConfigError("rtol must be positive")
    if not t1 > t0:
        raise ConfigError("interval end must exceed its start")
    bound = bound or model.bind(theta)
    span = t1 - t0
    hmin = span * 1e-10
    x = np.asarray(x0, dtype=float)
    t = t0
    f = bound.rhs(t, x)
    _check_finite(f)
    if h0 is None:
        d0 = float(np.max(np.abs(x)))
        d1 = float(np.max(np.abs(f)))
        h = span if d1 <= 1e-12 * (1.0 + d0) else min(span, 0.01 * (1.0 + d0) / d1)
    else:
        h = min(h0, span)
    x_prev = None
    h_prev = None
    steps = 0
    failures = 0
    while t1 - t > 1e-12 * span:
        if t + h > t1 or t1 - (t + h) <= 1e-12 * span:
            h = t1 - t
        if x_prev is None:
            p = 1
            known = x
            hb0 = h
            xpred = x + h * f
            factor = _BDF1_FACTOR
        else:
            p = 2
            w = h / h_prev
            den = 1.0 + 2.0 * w
            known = ((1.0 + w) ** 2 / den) * x - (w * w / den) * x_prev
            hb0 = h * (1.0 + w) / den
            c = (x_prev - x + h_prev * f) / (h_prev * h_prev)
            xpred = x + h * f + (h * h) * c
            factor = _BDF2_FACTOR
        try:
            x_new, _ = newton_solve(bound, t + h, known, hb0, xpred, tol, max_iter)
            f_new = bound.rhs(t + h, x_new)
            _check_finite(f_new)
        except (NewtonDivergenceError, ParticleInvalidError, SingularBlockError):
            failures += 1
            h *= _MIN_FACTOR
            if h < hmin:
                raise StiffnessError(f"step size underflow at t={t}")
            continue
        est = float(np.max(np.abs(factor * (x_new - xpred))))
        err = est / (rtol * (1.0 + float(np.max(np.abs(x_new)))))
        if err <= 1.0:
            t = t + h
            x_prev, h_prev = x, h
            x, f = x_new, f_new
            steps += 1
        grow = _MAX_FACTOR if err == 0.0 else _SAFETY * err ** (-1.0 / (p + 1))
        h = h * min(_MAX_FACTOR, max(_MIN_FACTOR, grow))
        if h < hmin and t1 - t > 1e-12 * span:
            raise StiffnessError(f"step size underflow at t={t}")
    gamma = np.full(x.shape, rtol * steps)
    return PropagationResult(x, gamma, steps, failures)


# -- integrator selection --------------------------------------------------------

ADAPTIVE_NAME = "adaptive-bdf2"
INTEGRATOR_NAMES = tuple(f"{f}{q}" for f in ("ab", "am", "bdf") for q in (1, 2, 3)) + (ADAPTIVE_NAME,)


@dataclass(frozen=True)
class Integrator:
    """Either a fixed-step scheme with step ``h`` or the adaptive BDF(1,2) controller."""

    scheme: LmmScheme | None = None
    h: float | None = None
    rtol: float | None = None

    def __post_init__(self):
        if self.scheme is None:
            if self.rtol is None or not self.rtol > 0:
                raise ConfigError("the adaptive integrator needs rtol > 0")
        elif self.h is None or not self.h > 0:
            raise ConfigError("fixed-step integrators need h > 0")

    @property
    def adaptive(self) -> bool:
        return self.scheme is None

    @property
    def name(self) -> str:
        return ADAPTIVE_NAME if self.adaptive else self.scheme.name

    def check_interval(self, t0, t1):
        if self.adaptive:
            if not t1 > t0:
                raise ConfigError("interval end must exceed its start")
        else:
            _n_steps(t0, t1, self.h)

    def propagate(self, model, theta, x0, t0, t1, bound=None) -> PropagationResult:
        if self.adaptive:
            return adaptive_bdf_interval(model, theta, x0, t0, t1, self.rtol, bound=bound)
        return propagate_interval(model, theta, x0, t0, t1, self.h, self.scheme, bound=bound)


def make_integrator(name: str, h: float | None = None, rtol: float | None = None) -> Integrator:
    """Build an :class:`Integrator` from an id such as ``"bdf2"`` or ``"adaptive-bdf2"``."""
    key = str(name).strip().lower()
    if key == ADAPTIVE_NAME:
        return Integrator(rtol=1e-3 if rtol is None else rtol)
    return Integrator(scheme=parse_integrator(key), h=h)
