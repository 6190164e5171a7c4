import math

import numpy as np
import pytest

from ergoflow.coeffs import (
    CATALOG,
    ModelError,
    check_derivatives,
    make_model,
    validate_recurrence,
)
from ergoflow.expr import ExpressionError

PROBES = np.linspace(-5, 5, 100)


def test_ou_definition():
    model = make_model("ou", beta=1.0, sigma0=1.0)
    assert model.m(2.0) == -2.0
    assert model.sigma(2.0) == 1.0


def test_tanh_drift_at_origin():
    model = make_model("tanh_drift", kappa=1.0)
    assert model.m(0.0) == 0.0
    assert model.m.derivative(0.0, 1) == -1.0


def test_parameter_aliases():
    a = make_model("ou", β=2.0, σ0=0.5)
    assert a.m(1.0) == -2.0
    assert a.sigma(1.0) == 0.5


@pytest.mark.parametrize("name", sorted(CATALOG))
def test_catalog_derivatives_match_finite_differences(name):
    model = make_model(name)
    assert check_derivatives(model.m, PROBES) <= 1e-6
    assert check_derivatives(model.sigma, PROBES) <= 1e-6


@pytest.mark.parametrize("name", sorted(CATALOG))
def test_modified_drift_matches_catalog_form(name):
    model = make_model(name)
    np.testing.assert_allclose(model.q(PROBES), model.q_direct(PROBES), rtol=0, atol=1e-12)


def test_modified_drift_for_variable_sigma():
    model = make_model({"sigma": "1+0.5*tanh(x)", "m": "-x"})
    x = PROBES
    sig = 1 + 0.5 * np.tanh(x)
    dsig = 0.5 / np.cosh(x) ** 2
    np.testing.assert_allclose(model.q(x), -x + 0.5 * sig * dsig, rtol=1e-9, atol=1e-9)


def test_expression_derivative_step():
    # central differences with h = cbrt(eps) max(1, |x|)
    f = make_model({"sigma": "1", "m": "sin(x)"}).m
    x = np.array([0.3, 7.0])
    np.testing.assert_allclose(f.derivative(x, 1), np.cos(x), rtol=1e-9)


def test_unknown_catalog_id():
    with pytest.raises(ModelError, match="unknown catalog id"):
        make_model("lorenz")


def test_expression_parse_error_has_position():
    with pytest.raises(ExpressionError) as err:
        make_model({"sigma": "1", "m": "-x*"})
    assert err.value.pos == 3


def test_sigma_not_positive():
    # 0.4 + 0.5 sin(3 pi/2) = -0.1
    with pytest.raises(ModelError, match="sigma not positive"):
        make_model({"sigma": "0.4+0.5*sin(x)", "m": "-x"})


def test_ou_positive_recurrent_lambda():
    model, report = validate_recurrence(make_model("ou"))
    assert model.recurrence_status == "positive_recurrent"
    assert report.lambda_ == pytest.approx(math.sqrt(math.pi), rel=1e-9)


def test_brownian_motion_rejected():
    model, report = validate_recurrence(make_model({"sigma": "1", "m": "0"}))
    assert model.recurrence_status == "rejected: Λ diverges"
    assert not model.is_positive_recurrent


def test_repelling_drift_is_transient():
    model, _ = validate_recurrence(make_model({"sigma": "1", "m": "beta*x", "params": {"beta": 1.0}}))
    assert model.recurrence_status == "rejected: scale integral converges (transient)"


def test_small_window_is_inconclusive():
    # weak confinement: the speed integral has not settled by |x| = 2
    model, report = validate_recurrence(make_model({"sigma": "1", "m": "-0.01*x"}), window=2.0)
    assert report.reason.startswith("inconclusive at window")


@pytest.mark.parametrize("name", sorted(CATALOG))
def test_catalog_models_are_positive_recurrent(name):
    model, report = validate_recurrence(make_model(name))
    assert report.positive_recurrent
    assert report.scale_states == ("diverges", "diverges")


def test_models_are_immutable():
    model = make_model("ou")
    with pytest.raises(AttributeError):
        model.name = "other"
