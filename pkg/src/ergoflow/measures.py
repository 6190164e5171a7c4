"""Quadrature for the invariant measure, scale/speed functions and focusing rate.

All improper integrals are truncated to ``[-W, W]``. The scale density
``s' = psi^2/sigma^2`` overflows long before ``|x| = 40`` for the catalog
models, so every tabulation is kept in log form and only exponentiated
where the result is representable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.interpolate import CubicHermiteSpline

from .coeffs import (
    DEFAULT_DIVERGENCE_CUTOFF,
    DEFAULT_WINDOW,
    CoefficientFunction,
    DiffusionModel,
    from_expression,
)

DEFAULT_N_GRID = 16384
QUAD_TOL = 1e-9

_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(16)


class RecurrenceError(ValueError):
    """The model has not been validated as positive recurrent."""


class QuadratureError(RuntimeError):
    """A truncated integral failed its accuracy or convergence check."""


class InfiniteGammaError(ValueError):
    """The focusing rate is infinite; rate-dependent features are disabled."""


def simpson_richardson(values: np.ndarray, h: float) -> tuple[float, float]:
    """Composite Simpson at ``h`` refined once by Richardson against step ``2h``.

    ``len(values) - 1`` must be divisible by 4. Returns ``(integral, error_estimate)``.
    """
    n = len(values) - 1
    if n % 4:
        raise ValueError("need a multiple of 4 intervals")
    fine = h / 3 * (values[0] + values[-1] + 4 * values[1:-1:2].sum() + 2 * values[2:-1:2].sum())
    c = values[::2]
    coarse = 2 * h / 3 * (c[0] + c[-1] + 4 * c[1:-1:2].sum() + 2 * c[2:-1:2].sum())
    return fine + (fine - coarse) / 15, abs(fine - coarse) / 15


def cumulative_hermite(f: np.ndarray, df: np.ndarray, h: float) -> np.ndarray:
    """Running integral from the left edge using the end-corrected trapezoid rule (O(h^4))."""
    with np.errstate(over="ignore", invalid="ignore"):
        cells = 0.5 * h * (f[:-1] + f[1:]) + h**2 / 12 * (df[:-1] - df[1:])
        cells = np.where(np.isfinite(cells), cells, np.inf)
        return np.concatenate([[0.0], np.cumsum(cells)])


def cumulative_from_center(f: np.ndarray, df: np.ndarray, h: float) -> np.ndarray:
    """Running integral anchored at the middle node, accumulated outward on each side."""
    i0 = (len(f) - 1) // 2
    right = cumulative_hermite(f[i0:], df[i0:], h)
    left = cumulative_hermite(f[: i0 + 1][::-1], -df[: i0 + 1][::-1], h)
    return np.concatenate([-left[::-1], right[1:]])


def log_cells(logf: np.ndarray, dlogf: np.ndarray, h: float) -> np.ndarray:
    """Log of per-cell integrals of ``exp(logf)`` by the end-corrected trapezoid rule."""
    with np.errstate(over="ignore", invalid="ignore"):
        log_trap = np.log(h / 2) + np.logaddexp(logf[:-1], logf[1:])
        # weights of the endpoint derivatives relative to the trapezoid sum
        w0 = np.exp(logf[:-1] - np.logaddexp(logf[:-1], logf[1:]))
        corr = h / 6 * (w0 * dlogf[:-1] - (1 - w0) * dlogf[1:])
        corr = np.where(np.isfinite(corr), np.maximum(corr, -0.5), 0.0)
    return log_trap + np.log1p(corr)


def derivative6(values: np.ndarray, h: float) -> np.ndarray:
    """Sixth-order central differences in the interior, second-order at the edges."""
    d = np.gradient(values, h, edge_order=2)
    v = values
    d[3:-3] = (
        -v[:-6] + 9 * v[1:-5] - 45 * v[2:-4] + 45 * v[4:-2] - 9 * v[5:-1] + v[6:]
    ) / (60 * h)
    return d


@dataclass(frozen=True)
class GammaValue:
    """Focusing rate ``gamma = 2 int m^2/sigma^2 dPi`` from two independent formulas.

    ``finite=False`` means the integral exceeded the divergence cutoff or did
    not settle inside the window; ``value`` is then ``None``.
    """

    value: float | None
    finite: bool
    alternative: float | None
    rel_diff: float | None
    reason: str = ""

    def require(self) -> float:
        if not self.finite:
            raise InfiniteGammaError(f"gamma is infinite ({self.reason})")
        return self.value


@dataclass(frozen=True)
class MeasureTable:
    model: DiffusionModel
    window: float
    x: np.ndarray
    inner: np.ndarray            # int_0^x 2m/sigma^2
    log_sigma: np.ndarray
    log_lambda: float
    log_psi2: np.ndarray
    dlog_psi2: np.ndarray        # d/dx ln psi^2
    pi_pdf: np.ndarray
    pi_cdf: np.ndarray
    s: np.ndarray                # scale function, s(0) = 0; +-inf where it overflows
    speed_incr: np.ndarray       # mu increments per cell, from 2 psi^-2
    scale_incr: np.ndarray       # s increments per cell, from psi^2/sigma^2
    quad_error: float
    gamma: GammaValue = field(default=None)
    _inner_spline: CubicHermiteSpline = field(default=None, repr=False)
    _cdf_spline: CubicHermiteSpline = field(default=None, repr=False)

    @property
    def h(self) -> float:
        return float(self.x[1] - self.x[0])

    @property
    def lambda_(self) -> float:
        return math.exp(self.log_lambda)

    @property
    def psi2(self) -> np.ndarray:
        with np.errstate(over="ignore"):
            return np.exp(self.log_psi2)

    @property
    def log_scale_density(self) -> np.ndarray:
        """``ln s'`` on the grid."""
        return self.log_psi2 - 2 * self.log_sigma

    @property
    def sharp_scale(self) -> np.ndarray:
        """Scale function of the sharp diffusion, anchored at 0: ``2 (Pi(x) - Pi(0))``."""
        return 2 * (self.pi_cdf - self.pi_cdf[len(self.x) // 2])

    @property
    def sharp_speed_incr(self) -> np.ndarray:
        """Speed-measure increments of the sharp diffusion (the scale increments of X)."""
        return self.scale_incr

    def cdf(self, x) -> np.ndarray:
        """Invariant CDF by cubic Hermite interpolation (density as slope), 0/1 outside the window."""
        x = np.asarray(x, dtype=float)
        return np.clip(np.where(x < self.x[0], 0.0, np.where(x > self.x[-1], 1.0, self._cdf_spline(x))), 0.0, 1.0)

    def pdf(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return np.exp(self._inner_spline(x) - np.log(self.model.sigma(x)) - self.log_lambda)

    def log_scale_density_at(self, u) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        return self.log_lambda - np.log(self.model.sigma(u)) - self._inner_spline(u)

    def log_scale_gap(self, xa, xb) -> np.ndarray:
        """``ln(s(xb) - s(xa))`` for ``xa < xb`` (elementwise, 16-point Gauss-Legendre in log form)."""
        xa = np.asarray(xa, dtype=float)
        xb = np.asarray(xb, dtype=float)
        mid = 0.5 * (xa + xb)
        half = 0.5 * (xb - xa)
        u = mid[..., None] + half[..., None] * _GL_NODES
        logf = self.log_scale_density_at(u)
        c = logf.max(axis=-1)
        with np.errstate(divide="ignore"):
            return c + np.log(half * (np.exp(logf - c[..., None]) * _GL_WEIGHTS).sum(axis=-1))

    def expect(self, values) -> float:
        """``int values dPi`` on the grid (Simpson + Richardson)."""
        with np.errstate(invalid="ignore"):
            integrand = np.where(self.pi_pdf > 0, values * self.pi_pdf, 0.0)
        return simpson_richardson(integrand, self.h)[0]

    def index_of(self, x0: float) -> int:
        return int(np.clip(np.rint((x0 + self.window) / self.h), 0, len(self.x) - 1))


def _require_recurrent(model: DiffusionModel) -> None:
    if not model.is_positive_recurrent:
        raise RecurrenceError(
            f"model {model.name!r} recurrence status is {model.recurrence_status!r}; "
            "run validate_recurrence first"
        )


def build_measures(
    model: DiffusionModel,
    window: float = DEFAULT_WINDOW,
    n_grid: int = DEFAULT_N_GRID,
    tol: float = QUAD_TOL,
    divergence_cutoff: float = DEFAULT_DIVERGENCE_CUTOFF,
) -> MeasureTable:
    """Tabulate Lambda, psi^2, s, the invariant density/CDF and gamma on ``[-W, W]``."""
    _require_recurrent(model)
    if n_grid < 1000 or n_grid % 4:
        raise ValueError("n_grid must be >= 1000 and a multiple of 4")
    x = np.linspace(-window, window, n_grid + 1)
    h = x[1] - x[0]
    i0 = n_grid // 2

    sig = model.sigma(x)
    dsig = model.sigma.derivative(x, 1)
    m = model.m(x)
    dm = model.m.derivative(x, 1)
    log_sigma = np.log(sig)
    g = 2 * m / sig**2
    dg = 2 * dm / sig**2 - 4 * m * dsig / sig**3
    inner = cumulative_from_center(g, dg, h)

    log_speed = inner - log_sigma          # ln(Lambda psi^-2)
    c = log_speed.max()
    lam_scaled, lam_err = simpson_richardson(np.exp(log_speed - c), h)
    if lam_err > tol * lam_scaled:
        raise QuadratureError(f"Lambda quadrature error {lam_err / lam_scaled:.2e} exceeds {tol:g}")
    log_lambda = c + math.log(lam_scaled)

    log_psi2 = log_lambda + log_sigma - inner
    pdf = np.exp(log_speed - log_lambda)
    dpdf = pdf * (g - dsig / sig)
    cdf = cumulative_hermite(pdf, dpdf, h)
    if abs(cdf[-1] - 1.0) > max(tol, 10 * lam_err / lam_scaled) * 10:
        raise QuadratureError(f"invariant CDF ends at {cdf[-1]!r}, not 1")
    if pdf[0] * window > 1e-10 or pdf[-1] * window > 1e-10:
        raise QuadratureError(f"invariant density not negligible at the window edge W={window:g}")
    cdf = np.clip(cdf, 0.0, None)

    with np.errstate(over="ignore", invalid="ignore"):
        log_ds = log_psi2 - 2 * log_sigma
        ds = np.exp(log_ds)
        dds = ds * (-dsig / sig - g)
        s = cumulative_from_center(ds, dds, h)
        dlog_psi2 = dsig / sig - g
        scale_incr = np.exp(log_cells(log_ds, dlog_psi2 - 2 * dsig / sig, h))
    speed_incr = np.exp(log_cells(math.log(2.0) - log_psi2, -dlog_psi2, h))

    table = MeasureTable(
        model=model, window=float(window), x=x, inner=inner, log_sigma=log_sigma,
        log_lambda=log_lambda, log_psi2=log_psi2, dlog_psi2=dlog_psi2, pi_pdf=pdf, pi_cdf=cdf, s=s,
        speed_incr=speed_incr, scale_incr=scale_incr, quad_error=lam_err / lam_scaled,
        _inner_spline=CubicHermiteSpline(x, inner, g),
        _cdf_spline=CubicHermiteSpline(x, cdf, pdf),
    )
    object.__setattr__(table, "gamma", gamma_quadrature(table, model, divergence_cutoff))
    return table


def _edge_fraction(table: MeasureTable, integrand: np.ndarray) -> float:
    """Share of ``int integrand`` carried by the outer tenth of the window."""
    n = len(table.x)
    k = n // 20
    total = np.abs(integrand).sum()
    if total == 0:
        return 0.0
    return float((np.abs(integrand[:k]).sum() + np.abs(integrand[-k:]).sum()) / total)


def gamma_quadrature(
    table: MeasureTable, model: DiffusionModel, divergence_cutoff: float = DEFAULT_DIVERGENCE_CUTOFF
) -> GammaValue:
    """``gamma = 2 int m^2/sigma^2 dPi``, cross-checked against the
    ``1/2 int (1/s') (sigma'/sigma - 2 psi'/psi)^2`` form."""
    x = table.x
    sig = model.sigma(x)
    rate_density = 2 * model.m(x) ** 2 / sig**2
    integrand = rate_density * table.pi_pdf
    value = table.expect(rate_density)
    if not np.isfinite(value) or value > divergence_cutoff or _edge_fraction(table, integrand) > 1e-8:
        return GammaValue(None, False, None, None, reason="focusing-rate integral diverges")

    # psi'/psi from the tabulated ln psi^2 by finite differences, independent of m
    two_dlogpsi = derivative6(table.log_psi2, table.h)
    dlogsigma = model.sigma.derivative(x, 1) / sig
    with np.errstate(over="ignore", under="ignore"):
        inv_ds = np.exp(2 * table.log_sigma - table.log_psi2)
    alt_integrand = 0.5 * inv_ds * (dlogsigma - two_dlogpsi) ** 2
    k = 8  # keep clear of the low-order edge stencils
    alt = simpson_richardson(alt_integrand[k:-k], table.h)[0]
    rel = abs(alt - value) / abs(value) if value else abs(alt)
    return GammaValue(float(value), True, float(alt), float(rel))


@dataclass
class GapReport:
    gamma: float | None
    conditions: dict
    V: np.ndarray
    beta_shift: float | None
    alpha_norm: float | None
    rayleigh_of_F: float | None
    F_mean: float | None
    F_second_moment: float | None
    bound_holds: bool | None

    def to_dict(self) -> dict:
        return {
            "gamma": self.gamma,
            "conditions": self.conditions,
            "beta_shift": self.beta_shift,
            "alpha_norm": self.alpha_norm,
            "rayleigh_of_F": self.rayleigh_of_F,
            "F_mean": self.F_mean,
            "F_second_moment": self.F_second_moment,
            "bound_holds": self.bound_holds,
        }


def _finite_moment(table: MeasureTable, values: np.ndarray, cutoff: float) -> bool:
    val = table.expect(values)
    return bool(np.isfinite(val) and val < cutoff and _edge_fraction(table, values * table.pi_pdf) < 1e-8)


def spectral_gap_bound(
    table: MeasureTable,
    model: DiffusionModel,
    tol: float = 1e-6,
    divergence_cutoff: float = DEFAULT_DIVERGENCE_CUTOFF,
) -> GapReport:
    """Rayleigh quotient of the trial function ``F = alpha (V + beta)``, ``V = int_0^x 1/sigma``.

    When the three integrability conditions hold, the quotient bounds the
    spectral gap from above and must itself not exceed gamma.
    """
    x = table.x
    sig = model.sigma(x)
    inv_sig = 1.0 / sig
    V = cumulative_from_center(inv_sig, -model.sigma.derivative(x, 1) / sig**2, table.h)
    cond = {
        "a": _finite_moment(table, V**2, divergence_cutoff),
        "b": _finite_moment(table, sig**2, divergence_cutoff),
        "c": table.gamma.finite,
    }
    gamma = table.gamma.value
    if not all(cond.values()):
        return GapReport(gamma, cond, V, None, None, None, None, None, None)

    beta_shift = -table.expect(V)
    alpha = 1.0 / math.sqrt(table.expect((V + beta_shift) ** 2))
    F = alpha * (V + beta_shift)
    F_mean = table.expect(F)
    F_m2 = table.expect(F**2)
    if abs(F_mean) > 1e-8 or abs(F_m2 - 1) > 1e-8:
        raise QuadratureError(f"trial function not normalized: mean {F_mean:.3e}, second moment {F_m2:.12f}")
    dF = alpha * inv_sig
    with np.errstate(over="ignore", under="ignore"):
        inv_ds = np.exp(2 * table.log_sigma - table.log_psi2)
    rayleigh = 0.5 * simpson_richardson(dF**2 * inv_ds, table.h)[0]
    return GapReport(
        gamma, cond, V, float(beta_shift), float(alpha), float(rayleigh),
        float(F_mean), float(F_m2), bool(rayleigh <= gamma + tol),
    )


def rayleigh_quotient(table: MeasureTable, f: CoefficientFunction | str | Callable, df: Callable | None = None) -> float:
    """``1/2 int (f')^2 / s'`` for ``f`` centred and scaled to unit variance under Pi."""
    if isinstance(f, str):
        f = from_expression(f)
    x = table.x
    if isinstance(f, CoefficientFunction):
        fv, dfv = f(x), f.derivative(x, 1)
    else:
        if df is None:
            raise ValueError("plain callables need an explicit derivative")
        fv, dfv = np.asarray(f(x), dtype=float), np.asarray(df(x), dtype=float)
    mean = table.expect(fv)
    var = table.expect((fv - mean) ** 2)
    if not var > 1e-14 * max(1.0, table.expect(fv**2)):
        raise ValueError("trial function has zero variance under the invariant measure")
    with np.errstate(over="ignore", under="ignore"):
        inv_ds = np.exp(2 * table.log_sigma - table.log_psi2)
    return float(0.5 * simpson_richardson(dfv**2 * inv_ds, table.h)[0] / var)


TRIAL_FAMILY = ("x", "x^3", "tanh(x)", "x/sqrt(1+x^2)", "x+0.1*x^3", "sin(x)")


def trial_family_minimum(table: MeasureTable, model: DiffusionModel) -> tuple[float, str]:
    """Smallest Rayleigh quotient over a fixed six-function family (``V`` replaces ``x`` if sigma varies)."""
    best = (math.inf, "")
    for src in TRIAL_FAMILY:
        try:
            r = rayleigh_quotient(table, src)
        except ValueError:
            continue
        best = min(best, (r, src))
    gap = spectral_gap_bound(table, model)
    if gap.rayleigh_of_F is not None:
        best = min(best, (gap.rayleigh_of_F, "V"))
    return best


@dataclass
class BoundaryReport:
    windows: list[float]
    log_double_integral: dict          # side -> list of ln values per window
    non_entrance: dict                 # side -> bool
    sharp_scale_limits: tuple[float, float]
    sharp_scale_tail_change: float     # |s#(W) - s#(W/2)| + |s#(-W) - s#(-W/2)|
    sharp_transient: bool


def boundary_classification(table: MeasureTable, windows=None) -> BoundaryReport:
    """Trend of ``int_0^W ds#(y) int_y^W dmu#(z)`` (and its mirror) as ``W`` grows."""
    W = table.window
    windows = list(windows or (W / 8, W / 4, W / 2, W))
    x = table.x
    h = table.h
    i0 = len(x) // 2
    log_ds = table.log_scale_density
    dlog_ds = table.dlog_psi2 - 2 * np.gradient(table.log_sigma, h)
    log_dmu = math.log(2.0) - table.log_psi2
    out = {"+inf": [], "-inf": []}
    for w in windows:
        k = int(round(w / h))
        # +inf: int_0^w dmu(y) int_y^w ds(z)
        cells = log_cells(log_ds[i0 : i0 + k + 1], dlog_ds[i0 : i0 + k + 1], h)
        tail = np.concatenate([np.logaddexp.accumulate(cells[::-1])[::-1], [-np.inf]])
        wts = np.full(k + 1, math.log(h))
        wts[[0, -1]] = math.log(h / 2)
        out["+inf"].append(float(np.logaddexp.reduce(log_dmu[i0 : i0 + k + 1] + tail + wts)))
        # -inf: int_{-w}^0 dmu(y) int_{-w}^y ds(z)
        cells = log_cells(log_ds[i0 - k : i0 + 1], dlog_ds[i0 - k : i0 + 1], h)
        head = np.concatenate([[-np.inf], np.logaddexp.accumulate(cells)])
        out["-inf"].append(float(np.logaddexp.reduce(log_dmu[i0 - k : i0 + 1] + head + wts)))

    def non_entrance(vals):
        return bool(np.all(np.diff(vals) > 0) and vals[-1] > math.log(1e4))

    ssharp = table.sharp_scale
    half = int(round(W / 2 / h))
    change = abs(ssharp[-1] - ssharp[i0 + half]) + abs(ssharp[0] - ssharp[i0 - half])
    return BoundaryReport(
        windows=windows,
        log_double_integral=out,
        non_entrance={k: non_entrance(v) for k, v in out.items()},
        sharp_scale_limits=(float(ssharp[0]), float(ssharp[-1])),
        sharp_scale_tail_change=float(change),
        sharp_transient=bool(change < 1e-10),
    )


def default_escape_threshold(table: MeasureTable, tail: float = 1e-12, factor: float = 1.5) -> float:
    """``factor`` times the larger |x| beyond which the invariant tail mass drops below ``tail``."""
    lo = table.x[np.searchsorted(table.pi_cdf, tail, side="left")]
    hi = table.x[np.searchsorted(table.pi_cdf, 1 - tail, side="right")] if table.pi_cdf[-1] > 1 - tail else table.x[-1]
    return float(factor * max(abs(lo), abs(hi)))
