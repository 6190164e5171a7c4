import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ergoflow.coeffs import make_model, validate_recurrence
from ergoflow.flow import new_ensemble, step_forward
from ergoflow.noise import NoisePath
from ergoflow.oracle import (
    OuParams,
    discrete_xinf_variance,
    ou_exact_flow,
    ou_exact_xinf,
    ou_stationary_sharp,
    strong_order,
)

DT = 1e-3
P = OuParams(1.0, 1.0)
N_SEEDS = 20_000


def _blocked(fn, n=N_SEEDS, block=1000):
    """``fn(path)`` over consecutive seed blocks, concatenated (keeps memory bounded)."""
    return np.concatenate([fn(NoisePath(np.arange(i, i + block), DT)) for i in range(0, n, block)])


def test_params_validated():
    with pytest.raises(ValueError):
        OuParams(0.0, 1.0)
    with pytest.raises(ValueError):
        OuParams(1.0, -1.0)
    assert OuParams(2.0, 3.0).stationary_variance == pytest.approx(9 / 4)


@pytest.mark.parametrize("beta", [0.5, 1.0, 3.0])
def test_exact_flow_zero_noise(beta):
    x = ou_exact_flow(OuParams(beta, 1.0), NoisePath.zeros(DT), 1.7, 2.0)
    assert x == pytest.approx(1.7 * math.exp(-2 * beta), rel=1e-14)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**40), beta=st.floats(0.1, 5.0), n=st.integers(1, 2000))
def test_exact_flow_is_affine_in_x0(seed, beta, n):
    p, path, T = OuParams(beta, 1.0), NoisePath(seed, DT), n * DT
    diff = ou_exact_flow(p, path, 2.0, T) - ou_exact_flow(p, path, 0.0, T)
    assert diff == pytest.approx(2 * math.exp(-beta * T), rel=1e-12)


def test_exact_flow_at_zero_time():
    assert ou_exact_flow(P, NoisePath(1, DT), 0.3, 0.0) == 0.3


def test_xinf_needs_long_horizon():
    with pytest.raises(ValueError):
        ou_exact_xinf(P, NoisePath(1, DT), 10.0)


def test_xinf_zero_noise():
    value, tail = ou_exact_xinf(P, NoisePath.zeros(DT), 20.0)
    assert value == 0.0 and tail < 1e-8


def test_xinf_variance():
    value = _blocked(lambda path: ou_exact_xinf(P, path, 20.0)[0])
    exact = discrete_xinf_variance(P, DT, 20.0)
    # left-point weights bias the sum by a factor 1 + dt
    assert exact == pytest.approx(0.5 * (1 + DT), rel=1e-6)
    # relative standard error of a sample variance is sqrt(2/n) = 1%
    assert value.var() == pytest.approx(exact, rel=0.03)


def test_sigma0_scaling():
    path = NoisePath(np.arange(4), DT)
    a, _ = ou_exact_xinf(OuParams(1.0, 1.0), path, 20.0)
    b, _ = ou_exact_xinf(OuParams(1.0, 2.5), path, 20.0)
    np.testing.assert_allclose(b, 2.5 * a, rtol=1e-14)


def test_stationary_sharp_at_zero_is_xinf():
    path = NoisePath(np.arange(4), DT)
    np.testing.assert_allclose(ou_stationary_sharp(P, path, 0.0, 25.0), ou_exact_xinf(P, path, 25.0)[0], rtol=1e-13)


def test_stationary_sharp_algebra():
    path, t = NoisePath(np.arange(4), DT), 1.0
    xinf, _ = ou_exact_xinf(P, path, 26.0)
    head = (np.exp(-DT * np.arange(1000))[:, None] * path.increments(0, 1000)).sum(axis=0)
    expected = math.exp(t) * (xinf + head)
    np.testing.assert_allclose(ou_stationary_sharp(P, path, t, 25.0), expected, rtol=1e-12, atol=1e-14)


def test_stationary_sharp_variance_constant():
    v0 = _blocked(lambda path: ou_stationary_sharp(P, path, 0.0, 20.0)).var()
    v1 = _blocked(lambda path: ou_stationary_sharp(P, path, 1.0, 20.0)).var()
    assert v1 == pytest.approx(v0, rel=0.03)


def test_milstein_strong_order():
    # reference: exact flow on a 1e-4 grid; coarse schemes use summed fine increments
    model, _ = validate_recurrence(make_model("ou"))
    path = NoisePath(np.arange(200), 1e-4)
    dts, errs = [4e-3, 2e-3, 1e-3], []
    fine = path.increments(0, 10_000)
    for dt in dts:
        k = round(dt / 1e-4)
        coarse = fine.reshape(-1, k, fine.shape[-1]).sum(axis=1)

        class Coarse:
            batch_shape = path.batch_shape
            zero = False

            def __init__(self, dt):
                self.dt = dt

            def increments(self, j0, j1):
                return coarse[j0:j1]

        cp = Coarse(dt)
        x = step_forward(model, cp, new_ensemble(cp, [1.0]), coarse.shape[0], scheme="milstein").x[0]
        errs.append(math.sqrt(np.mean((x - ou_exact_flow(P, path, 1.0, 1.0)) ** 2)))
    assert strong_order(dts, errs) >= 0.9


def test_strong_order_of_exact_power_law():
    dts = np.array([1e-3, 2e-3, 4e-3])
    assert strong_order(dts, 3 * dts**1.5) == pytest.approx(1.5)
