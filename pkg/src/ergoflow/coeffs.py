"""Diffusion models: coefficient functions, the catalog, and recurrence checks.

A model is the pair (sigma, m) of the Stratonovich equation
``dX = sigma(X) o db + m(X) dt``. Everything downstream works with the Ito
form, whose drift is the modified drift ``q = m + sigma sigma' / 2``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Sequence

import numpy as np

from . import expr as _expr

EPS = np.finfo(float).eps
DEFAULT_WINDOW = 40.0
DEFAULT_DIVERGENCE_CUTOFF = 1e8

# central-difference step exponents by derivative order
_FD_EXPONENT = {1: 1 / 3, 2: 1 / 4, 3: 1 / 5}


class ModelError(ValueError):
    """Invalid model specification."""


@dataclass(frozen=True)
class CoefficientFunction:
    """A real function of one variable with up to three derivatives.

    ``derivs`` holds analytic derivatives (index 0 is the first derivative);
    missing orders fall back to central differences with step
    ``h = eps**(1/(order+2)) * max(1, |x|)`` (``cbrt(eps)`` for the first).
    """

    kind: str
    params: Mapping[str, float]
    fn: Callable
    derivs: tuple = ()
    scalar_fn: Callable | None = None
    source: str | None = None

    @property
    def max_order(self) -> int:
        return 3

    @property
    def analytic_orders(self) -> int:
        return len(self.derivs)

    def __call__(self, x):
        return self.fn(x)

    def derivative(self, x, order: int = 1):
        if order == 0:
            return self.fn(x)
        if not 1 <= order <= 3:
            raise ValueError(f"derivative order {order} not supported (0..3)")
        if order <= len(self.derivs):
            return self.derivs[order - 1](x)
        return central_difference(self.fn, x, order)


def central_difference(fn: Callable, x, order: int = 1):
    x = np.asarray(x, dtype=float)
    h = EPS ** _FD_EXPONENT[order] * np.maximum(1.0, np.abs(x))
    if order == 1:
        return (fn(x + h) - fn(x - h)) / (2 * h)
    if order == 2:
        return (fn(x + h) - 2 * fn(x) + fn(x - h)) / h**2
    return (fn(x + 2 * h) - 2 * fn(x + h) + 2 * fn(x - h) - fn(x - 2 * h)) / (2 * h**3)


def constant(value: float, kind: str = "const") -> CoefficientFunction:
    value = float(value)
    zero = lambda x: np.zeros_like(np.asarray(x, dtype=float))  # noqa: E731
    return CoefficientFunction(
        kind=kind,
        params={"value": value},
        fn=lambda x: np.full_like(np.asarray(x, dtype=float), value),
        derivs=(zero, zero, zero),
        scalar_fn=lambda x: value,
    )


def from_expression(source: str, params: Mapping[str, float] | None = None) -> CoefficientFunction:
    params = dict(params or {})
    tree = _expr.parse(source, params)
    return CoefficientFunction(
        kind="expression",
        params=params,
        fn=_expr.compile_expr(tree, params),
        scalar_fn=_expr.compile_expr(tree, params, scalar=True),
        source=source,
    )


@dataclass(frozen=True)
class DiffusionModel:
    """A one-dimensional Stratonovich diffusion ``dX = sigma o db + m dt``.

    ``q_direct`` is the catalog's own closed form of the modified drift, when
    it has one. ``recurrence_status`` is ``"unchecked"``,
    ``"positive_recurrent"`` or ``"rejected: <reason>"``.
    """

    name: str
    sigma: CoefficientFunction
    m: CoefficientFunction
    params: Mapping[str, float] = field(default_factory=dict)
    q_direct: Callable | None = None
    recurrence_status: str = "unchecked"

    @property
    def is_positive_recurrent(self) -> bool:
        return self.recurrence_status == "positive_recurrent"

    def q(self, x):
        x = np.asarray(x, dtype=float)
        return self.m(x) + 0.5 * self.sigma(x) * self.sigma.derivative(x, 1)

    def drift_terms(self, x, sign: int = 1):
        """Return ``(ito_drift, sigma, sigma*sigma')`` for drift ``sign*m``."""
        x = np.asarray(x, dtype=float)
        s = self.sigma(x)
        ssp = s * self.sigma.derivative(x, 1)
        return sign * self.m(x) + 0.5 * ssp, s, ssp

    def scalar_terms(self, sign: int = 1) -> Callable[[float], tuple[float, float, float]]:
        """Float-only version of :meth:`drift_terms` for long single trajectories."""
        sig, m = self.sigma, self.m
        if sig.kind == "const":
            s0 = sig.params["value"]
            mf = m.scalar_fn or (lambda x: float(m(x)))
            return lambda x: (sign * mf(x), s0, 0.0)
        sf = sig.scalar_fn or (lambda x: float(sig(x)))
        mf = m.scalar_fn or (lambda x: float(m(x)))
        if sig.analytic_orders:
            d1 = sig.derivs[0]
            dsf = lambda x: float(d1(x))  # noqa: E731
        else:
            def dsf(x):
                h = EPS ** (1 / 3) * max(1.0, abs(x))
                return (sf(x + h) - sf(x - h)) / (2 * h)

        def terms(x):
            s = sf(x)
            ssp = s * dsf(x)
            return sign * mf(x) + 0.5 * ssp, s, ssp

        return terms

    def with_status(self, status: str) -> "DiffusionModel":
        return replace(self, recurrence_status=status)


# catalog


def _ou(beta=1.0, sigma0=1.0):
    if beta <= 0 or sigma0 <= 0:
        raise ModelError("ou needs beta > 0 and sigma0 > 0")
    m = CoefficientFunction(
        "ou_drift", {"beta": beta},
        fn=lambda x: -beta * np.asarray(x, dtype=float),
        derivs=(
            lambda x: np.full_like(np.asarray(x, dtype=float), -beta),
            lambda x: np.zeros_like(np.asarray(x, dtype=float)),
            lambda x: np.zeros_like(np.asarray(x, dtype=float)),
        ),
        scalar_fn=lambda x: -beta * x,
    )
    return constant(sigma0), m, (lambda x: -beta * np.asarray(x, dtype=float))


def _double_well(a=1.0, b=1.0, sigma0=1.0):
    if b <= 0 or sigma0 <= 0:
        raise ModelError("double_well needs b > 0 and sigma0 > 0")

    def fn(x):
        x = np.asarray(x, dtype=float)
        return a * x - b * x**3

    m = CoefficientFunction(
        "double_well_drift", {"a": a, "b": b},
        fn=fn,
        derivs=(
            lambda x: a - 3 * b * np.asarray(x, dtype=float) ** 2,
            lambda x: -6 * b * np.asarray(x, dtype=float),
            lambda x: np.full_like(np.asarray(x, dtype=float), -6 * b),
        ),
        scalar_fn=lambda x: a * x - b * x * x * x,
    )
    return constant(sigma0), m, fn


def _tanh_drift(kappa=1.0, sigma0=1.0):
    if kappa <= 0 or sigma0 <= 0:
        raise ModelError("tanh_drift needs kappa > 0 and sigma0 > 0")

    def sech2(x):
        return 1.0 / np.cosh(np.asarray(x, dtype=float)) ** 2

    def fn(x):
        return -kappa * np.tanh(np.asarray(x, dtype=float))

    m = CoefficientFunction(
        "tanh_drift", {"kappa": kappa},
        fn=fn,
        derivs=(
            lambda x: -kappa * sech2(x),
            lambda x: 2 * kappa * sech2(x) * np.tanh(x),
            lambda x: 2 * kappa * sech2(x) * (1 - 3 * np.tanh(x) ** 2),
        ),
        scalar_fn=lambda x: -kappa * math.tanh(x),
    )
    return constant(sigma0), m, fn


CATALOG: dict[str, Callable] = {
    "ou": _ou,
    "double_well": _double_well,
    "tanh_drift": _tanh_drift,
}

_PARAM_ALIASES = {"σ0": "sigma0", "β": "beta", "κ": "kappa"}


def make_model(spec: Mapping | str, window: float = DEFAULT_WINDOW, **params) -> DiffusionModel:
    """Build a model from a catalog id or from expression strings.

    ``spec`` is either a catalog id (``"ou"``) with keyword parameters, or a
    mapping shaped like the config file: ``{"kind": ..., "params": {...}}`` or
    ``{"sigma": "<expr>", "m": "<expr>", "params": {...}}``.

    >>> make_model("ou", beta=1.0).m(2.0)
    array(-2.)
    """
    if isinstance(spec, str):
        spec = {"kind": spec, "params": params}
    elif params:
        spec = {**spec, "params": {**spec.get("params", {}), **params}}
    p = {_PARAM_ALIASES.get(k, k): float(v) for k, v in dict(spec.get("params", {})).items()}

    if "kind" in spec:
        kind = spec["kind"]
        if kind not in CATALOG:
            raise ModelError(f"unknown catalog id {kind!r} (known: {', '.join(CATALOG)})")
        try:
            sigma, m, q = CATALOG[kind](**p)
        except TypeError as exc:
            raise ModelError(f"bad parameters for {kind!r}: {exc}") from None
        return DiffusionModel(kind, sigma, m, params=p, q_direct=q)

    if "sigma" not in spec or "m" not in spec:
        raise ModelError("model needs either 'kind' or both 'sigma' and 'm'")
    sigma = from_expression(str(spec["sigma"]), p)
    m = from_expression(str(spec["m"]), p)
    probe = probe_points(window)
    vals = sigma(probe)
    bad = ~(vals > 0)
    if bad.any():
        x_bad = probe[np.argmax(bad)]
        raise ModelError(f"sigma not positive (sigma({x_bad:.6g}) = {vals[bad][0]:.6g})")
    return DiffusionModel("expression", sigma, m, params=p)


def probe_points(window: float = DEFAULT_WINDOW, n: int = 8001) -> np.ndarray:
    return np.linspace(-window, window, n)


# recurrence


@dataclass
class RecurrenceReport:
    status: str
    reason: str
    log_lambda: float
    lambda_state: str
    scale_states: tuple[str, str]
    window: float

    @property
    def positive_recurrent(self) -> bool:
        return self.status == "positive_recurrent"

    @property
    def lambda_(self) -> float:
        return math.exp(self.log_lambda) if self.lambda_state == "converges" else math.inf


def _cumulative_inner(model: DiffusionModel, x: np.ndarray) -> np.ndarray:
    """``int_0^x 2m/sigma^2`` on a uniform grid containing 0 (corrected trapezoid)."""
    s = model.sigma(x)
    g = 2 * model.m(x) / s**2
    dg = 2 * model.m.derivative(x, 1) / s**2 - 4 * model.m(x) * model.sigma.derivative(x, 1) / s**3
    h = x[1] - x[0]
    cells = 0.5 * h * (g[:-1] + g[1:]) + h**2 / 12 * (dg[:-1] - dg[1:])
    cum = np.concatenate([[0.0], np.cumsum(cells)])
    i0 = int(np.argmin(np.abs(x)))
    return cum - cum[i0]


def _log_tail_decades(logf: np.ndarray, h: float, n_dec: int = 10) -> tuple[float, np.ndarray]:
    """Log of the total trapezoid integral over a half-line and of its ``n_dec`` equal pieces."""
    cells = np.log(h / 2) + np.logaddexp(logf[:-1], logf[1:])
    total = np.logaddexp.reduce(cells)
    usable = cells[len(cells) % n_dec:]
    decade = np.logaddexp.reduce(usable.reshape(n_dec, -1), axis=1)
    return float(total), decade


def _classify(log_total: float, log_decades: np.ndarray, cutoff: float, conv_tol: float = 1e-10) -> str:
    """'diverges', 'converges' or 'inconclusive' for a truncated positive integral."""
    incr = np.diff(log_decades)
    non_decreasing = bool(np.all(incr >= -1e-9 * np.maximum(1.0, np.abs(log_decades[1:]))))
    if log_total > math.log(cutoff) and non_decreasing:
        return "diverges"
    last_frac = math.exp(log_decades[-1] - log_total)
    if last_frac < conv_tol:
        return "converges"
    if non_decreasing:
        return "diverges"
    return "inconclusive"


def validate_recurrence(
    model: DiffusionModel,
    window: float = DEFAULT_WINDOW,
    divergence_cutoff: float = DEFAULT_DIVERGENCE_CUTOFF,
    n_grid: int = 16384,
) -> tuple[DiffusionModel, RecurrenceReport]:
    """Check positive recurrence numerically on ``[-window, window]``.

    Both one-sided scale integrals must diverge and the speed normalizer
    ``Lambda = int exp(int_0^x 2m/sigma^2) / sigma`` must be finite. Returns a
    copy of ``model`` with ``recurrence_status`` set, plus the report.
    """
    x = np.linspace(-window, window, n_grid + 1)
    h = x[1] - x[0]
    inner = _cumulative_inner(model, x)
    log_sigma = np.log(model.sigma(x))
    i0 = n_grid // 2

    log_scale = -inner - log_sigma
    right_total, right_dec = _log_tail_decades(log_scale[i0:], h)
    left_total, left_dec = _log_tail_decades(log_scale[: i0 + 1][::-1], h)
    scale_states = (
        _classify(left_total, left_dec, divergence_cutoff),
        _classify(right_total, right_dec, divergence_cutoff),
    )

    log_speed = inner - log_sigma
    rt, rd = _log_tail_decades(log_speed[i0:], h)
    lt, ld = _log_tail_decades(log_speed[: i0 + 1][::-1], h)
    sides = (_classify(lt, ld, divergence_cutoff), _classify(rt, rd, divergence_cutoff))
    if "diverges" in sides:
        lam_state = "diverges"
    elif sides == ("converges", "converges"):
        lam_state = "converges"
    else:
        lam_state = "inconclusive"
    log_lam = float(np.logaddexp(lt, rt))

    if "converges" in scale_states:
        status, reason = "rejected", "scale integral converges (transient)"
    elif lam_state == "diverges":
        status, reason = "rejected", "Λ diverges"
    elif lam_state == "inconclusive" or "inconclusive" in scale_states:
        status, reason = "rejected", f"inconclusive at window {window:g}"
    else:
        status, reason = "positive_recurrent", ""

    report = RecurrenceReport(status, reason, log_lam, lam_state, scale_states, window)
    tag = status if status == "positive_recurrent" else f"rejected: {reason}"
    return model.with_status(tag), report


def check_derivatives(fn: CoefficientFunction, probes: Sequence[float]) -> float:
    """Max relative mismatch between analytic first..third derivatives and central differences."""
    x = np.asarray(probes, dtype=float)
    worst = 0.0
    for order in range(1, fn.analytic_orders + 1):
        exact = fn.derivative(x, order)
        approx = _richardson_fd(fn.fn, x, order)
        scale = np.maximum(np.abs(exact), 1.0)
        worst = max(worst, float(np.max(np.abs(exact - approx) / scale)))
    return worst


def _richardson_fd(fn: Callable, x: np.ndarray, order: int) -> np.ndarray:
    # two-step Richardson on central differences; accurate enough for 1e-6 checks
    h = {1: 1e-3, 2: 1e-2, 3: 2e-2}[order] * np.maximum(1.0, np.abs(x))

    def d(hh):
        if order == 1:
            return (fn(x + hh) - fn(x - hh)) / (2 * hh)
        if order == 2:
            return (fn(x + hh) - 2 * fn(x) + fn(x - hh)) / hh**2
        return (fn(x + 2 * hh) - 2 * fn(x + hh) + 2 * fn(x - hh) - fn(x - 2 * hh)) / (2 * hh**3)

    return (4 * d(h / 2) - d(h)) / 3
