import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate, stats

from ergoflow.coeffs import make_model
from ergoflow.flow import (
    BracketError,
    FlowOverflowError,
    NonConvergenceError,
    SCHEMES,
    accumulate_log_jacobian,
    domain_endpoints,
    ksection,
    new_ensemble,
    stability_bound,
    step,
    step_forward,
    step_sharp,
)
from ergoflow.measures import default_escape_threshold
from ergoflow.noise import NoisePath
from ergoflow.oracle import OuParams, ou_exact_flow

DT = 1e-3


@pytest.mark.parametrize("scheme, tol", [("milstein_trapezoid", 1e-4), ("milstein", 3e-4)])
def test_zero_noise_ou_decays(ou, scheme, tol):
    # the plain scheme is Euler on the ODE: (1 - dt)^1000 = e^{-1.0005}
    path = NoisePath.zeros(DT)
    ens = step_forward(ou, path, new_ensemble(path, [1.0]), 1000, scheme=scheme)
    assert ens.x[0] == pytest.approx(math.exp(-1), abs=tol)
    assert ens.t == pytest.approx(1.0)


def test_ou_ensemble_mean(ou):
    path = NoisePath(np.arange(10_000), DT)
    x = step_forward(ou, path, new_ensemble(path, [1.0]), 1000).x[0]
    se = x.std() / math.sqrt(x.size)
    assert abs(x.mean() - math.exp(-1)) < 3 * se
    # exact variance (1 - e^{-2})/2
    assert x.var() == pytest.approx((1 - math.exp(-2)) / 2, rel=0.05)


@pytest.mark.parametrize("name", ["ou", "double_well", "tanh_drift"])
def test_order_preserved(models, name):
    path = NoisePath(np.arange(20), DT)
    ens = new_ensemble(path, np.linspace(-2, 2, 9))
    step_forward(models[name], path, ens, 2000, check_order=True)
    assert ens.order_violations == 0
    assert np.all(np.diff(ens.x, axis=0) >= 0)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**40), a=st.floats(-2, 2), d=st.floats(1e-6, 1.0))
def test_two_members_keep_order(ou, seed, a, d):
    path = NoisePath(seed, DT)
    ens = new_ensemble(path, [a, a + d])
    step_forward(ou, path, ens, 300, check_order=True)
    assert ens.order_violations == 0 and ens.x[0] < ens.x[1]


def test_sharp_zero_noise(ou):
    path = NoisePath.zeros(DT)
    ens = step_sharp(ou, path, new_ensemble(path, [0.1, 0.0, -0.1]), 10_000, escape_threshold=10.0)
    assert ens.status.tolist() == [1, 0, -1]
    assert ens.x[1] == 0.0
    # escape time ln(10/0.1) up to one step and the Heun error
    assert ens.escape_time[0] == pytest.approx(math.log(100), abs=5e-3)


def test_escaped_members_are_frozen(ou):
    path = NoisePath(3, DT)
    ens = step_sharp(ou, path, new_ensemble(path, [-3.0, 3.0]), 3000, escape_threshold=5.0)
    frozen = ens.x.copy()
    t_esc = ens.escape_time.copy()
    step_sharp(ou, path, ens, 1000, escape_threshold=5.0)
    assert ens.status.tolist() == [-1, 1]
    np.testing.assert_array_equal(ens.x, frozen)
    np.testing.assert_array_equal(ens.escape_time, t_esc)


def test_sharp_escape_fraction(ou, tables):
    # P(escape to +inf from 0.5) = Pi CDF at 0.5 = Phi(0.5 / sqrt(0.5))
    n = 10_000
    path = NoisePath(np.arange(n), DT)
    thr = default_escape_threshold(tables["ou"])
    ens = step_sharp(ou, path, new_ensemble(path, [0.5]), 10_000, escape_threshold=thr)
    st_ = ens.status[0]
    assert np.mean(st_ == 0) < 0.01
    p = float(stats.norm.cdf(0.5 / math.sqrt(0.5)))
    assert p == pytest.approx(0.76025, abs=1e-5)
    assert abs(np.mean(st_ == 1) - p) < 3 * math.sqrt(p * (1 - p) / n)


def test_ou_log_jacobian_in_scale_coordinates(ou):
    # ln dX/dx = -t, and ln s'(y) = ln sqrt(pi) + y^2
    path = NoisePath(np.arange(5), DT)
    x0 = np.array([-1.0, 0.3, 2.0])
    ens = accumulate_log_jacobian(ou, path, new_ensemble(path, x0, log_jacobian=True), 1000)
    expected = ens.x**2 - ens.x0**2 - 1.0
    np.testing.assert_allclose(ens.log_jac, expected, atol=2e-2)


def _ode_log_jacobian(model, x0, t):
    """Variational equation of dx = m dt in scale coordinates: d/dt ln(s'(x) dx/dx0)."""

    def rhs(_, y):
        x = y[0]
        m, dm = model.m(x), model.m.derivative(x, 1)
        sig, dsig = model.sigma(x), model.sigma.derivative(x, 1)
        dlog_s = -2 * m / sig**2 - dsig / sig
        return [m, dm + dlog_s * m]

    return integrate.solve_ivp(rhs, (0, t), [x0, 0.0], rtol=1e-11, atol=1e-12).y[1, -1]


@pytest.mark.parametrize("name", ["ou", "double_well", "tanh_drift"])
def test_zero_noise_log_jacobian_is_ode_jacobian(models, name):
    model = models[name]
    path = NoisePath.zeros(DT)
    ens = accumulate_log_jacobian(model, path, new_ensemble(path, [0.7], log_jacobian=True), 1000)
    assert ens.log_jac[0] == pytest.approx(_ode_log_jacobian(model, 0.7, 1.0), abs=2e-3)


def test_zero_noise_ou_log_jacobian_closed_form(ou):
    # -t from the Ito correction plus -2 int x^2 = -x0^2 (1 - e^{-2t})
    path = NoisePath.zeros(DT)
    ens = accumulate_log_jacobian(ou, path, new_ensemble(path, [0.7], log_jacobian=True), 1000)
    assert ens.log_jac[0] == pytest.approx(-1 - 0.49 * (1 - math.exp(-2)), abs=1e-3)


@pytest.mark.parametrize("name", ["ou", "double_well", "tanh_drift"])
def test_log_jacobian_matches_difference_quotient(models, tables, name):
    model, table = models[name], tables[name]
    h = 1e-4
    for seed in range(3):
        path = NoisePath(seed, DT)
        ens = accumulate_log_jacobian(model, path, new_ensemble(path, [0.4, 0.4 + h], log_jacobian=True), 1000)
        log_dq = table.log_scale_gap(ens.x[0], ens.x[1]) - math.log(h)
        log_pred = table.log_scale_density_at(0.4) + ens.log_jac[0]
        assert abs(log_dq - log_pred) < 0.01


def test_overflow_reports_member_and_step(models):
    path = NoisePath.zeros(0.5)
    with pytest.raises(FlowOverflowError) as info:
        step_forward(models["double_well"], path, new_ensemble(path, [0.0, 50.0]), 100, scheme="milstein")
    assert info.value.member == (1,)
    assert info.value.step >= 1


def test_unvalidated_model_rejected():
    path = NoisePath(0, DT)
    with pytest.raises(ValueError, match="positive recurrent"):
        step_forward(make_model("ou"), path, new_ensemble(path, [0.0]), 1)


def test_unknown_scheme(ou):
    with pytest.raises(ValueError, match="unknown scheme"):
        step(ou, 0.0, 0.0, DT, scheme="euler")


def test_stability_bound(ou):
    assert stability_bound(ou, 5.0) == pytest.approx(1.0)


@pytest.mark.parametrize("scheme", SCHEMES)
def test_matches_exact_ou_flow(ou, scheme):
    path = NoisePath(np.arange(10), DT)
    x0 = np.array([-1.0, 0.0, 2.0])
    ens = step_forward(ou, path, new_ensemble(path, x0), 1000, scheme=scheme)
    exact = ou_exact_flow(OuParams(1.0, 1.0), path, x0[:, None], 1.0)
    np.testing.assert_allclose(ens.x, exact, atol=2e-3)


def test_ksection_finds_a_switch():
    res = ksection(lambda xs: np.sign(xs - 0.3).astype(int), -1.0, 1.0, 1e-9)
    assert res.lower <= 0.3 <= res.upper and res.width <= 1e-9
    assert len(res.history) <= 6


def test_ksection_columnwise():
    targets = np.array([-0.5, 0.1, 0.7])
    res = ksection(lambda xs: np.sign(xs - targets).astype(int), -np.ones(3), np.ones(3), 1e-8)
    np.testing.assert_allclose(res.midpoint, targets, atol=1e-8)


def test_ksection_bad_bracket():
    with pytest.raises(BracketError):
        ksection(lambda xs: np.sign(xs - 2.0).astype(int), -1.0, 1.0, 1e-6)


def test_ksection_undecided_bracket():
    with pytest.raises(NonConvergenceError):
        ksection(lambda xs: np.where(xs < -0.99, -1, np.where(xs > 0.99, 1, 0)), -1.0, 1.0, 1e-6, k=8)


def test_domain_endpoints_without_explosion(ou):
    path = NoisePath.zeros(DT)
    L, R, flags = domain_endpoints(ou, path, 0.01, (-1.0, 1.0), escape_threshold=10.0)
    assert (L, R) == (-1.0, 1.0)
    assert flags == {"+inf": "no explosion observed", "-inf": "no explosion observed"}


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_domain_shrinks_in_time(ou, tables, seed):
    path = NoisePath(seed, DT)
    thr = default_escape_threshold(tables["ou"])
    L1, R1, f1 = domain_endpoints(ou, path, 2.0, (-thr, thr), escape_threshold=thr)
    L2, R2, f2 = domain_endpoints(ou, path, 4.0, (-thr, thr), escape_threshold=thr)
    assert not f1 and not f2
    assert L1 <= R1 and L2 <= R2
    assert L1 <= L2 + 1e-6 and R2 <= R1 + 1e-6
    assert R2 - L2 < R1 - L1


def test_domain_endpoints_bad_bracket(ou):
    with pytest.raises(BracketError):
        domain_endpoints(ou, NoisePath(0, DT), 1.0, (1.0, -1.0), escape_threshold=5.0)
