"""Monte Carlo estimators: Birkhoff gamma, two-point focusing slope, exit
probabilities, occupation measure, and Kolmogorov-Smirnov statistics."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.stats import gaussian_kde

from .coeffs import DiffusionModel
from .flow import DEFAULT_SCHEME, NonConvergenceError, new_ensemble, step, accumulate_log_jacobian
from .measures import MeasureTable, build_measures, default_escape_threshold
from .noise import NoisePath, to_steps

KS_C01 = 1.628  # asymptotic 1% critical constant
N_BATCHES = 20


@dataclass
class EstimateReport:
    value: float
    std_error: float
    n: int
    method: str
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.std_error < 0 or self.n < 1:
            raise ValueError("std_error must be >= 0 and n >= 1")

    def to_dict(self) -> dict:
        return {"value": self.value, "std_error": self.std_error, "n": self.n, "method": self.method,
                "diagnostics": self.diagnostics}


# KS machinery


def ks_distance(samples, cdf) -> float:
    """``sup |F_n - F|`` over sorted samples; ``cdf`` is a callable or an ``(x, F)`` grid."""
    x = np.sort(np.asarray(samples, dtype=float).ravel())
    n = len(x)
    if n == 0:
        raise ValueError("empty sample")
    if callable(cdf):
        F = np.asarray(cdf(x), dtype=float)
    else:
        gx, gF = cdf
        F = np.interp(x, gx, gF, left=0.0, right=1.0)
    i = np.arange(1, n + 1)
    return float(max(np.max(i / n - F), np.max(F - (i - 1) / n)))


def ks_two_sample(a, b) -> float:
    a = np.sort(np.asarray(a, dtype=float).ravel())
    b = np.sort(np.asarray(b, dtype=float).ravel())
    if not len(a) or not len(b):
        raise ValueError("empty sample")
    both = np.concatenate([a, b])
    fa = np.searchsorted(a, both, side="right") / len(a)
    fb = np.searchsorted(b, both, side="right") / len(b)
    return float(np.max(np.abs(fa - fb)))


def ks_critical(n: int, m: int | None = None, c: float = KS_C01) -> float:
    """1% critical value: ``c/sqrt(n)``, or ``c sqrt((n+m)/(n m))`` for two samples."""
    return c / math.sqrt(n) if m is None else c * math.sqrt((n + m) / (n * m))


def batch_means(values: np.ndarray, n_batches: int = N_BATCHES) -> tuple[float, float]:
    """Mean and batch-means standard error (trailing remainder dropped)."""
    values = np.asarray(values, dtype=float)
    k = len(values) // n_batches
    if k < 1:
        raise ValueError("fewer samples than batches")
    means = values[: k * n_batches].reshape(n_batches, k).mean(axis=1)
    return float(means.mean()), float(means.std(ddof=1) / math.sqrt(n_batches))


# long single trajectories


def scalar_trajectory(
    model: DiffusionModel,
    seed: int,
    T: float,
    dt: float = 1e-3,
    x0: float = 0.0,
    record_every: int = 1,
    observe: Callable[[float], float] | None = None,
    scheme: str = DEFAULT_SCHEME,
    chunk: int = 100_000,
) -> np.ndarray:
    """Forward trajectory on one seed as a plain float loop; returns ``observe(x)`` every ``record_every`` steps.

    Bit-for-bit the same arithmetic as :func:`ergoflow.flow.step` is not
    guaranteed (math vs numpy functions), but the scheme is identical.
    """
    terms = model.scalar_terms(1)
    n = to_steps(T, dt)
    path = NoisePath(seed, dt)
    out = np.empty(n // record_every)
    obs = observe or (lambda v: v)
    trap = scheme == "milstein_trapezoid"
    x = float(x0)
    k = 0
    done = 0
    while done < n:
        m = min(chunk, n - done)
        for i, dw in enumerate(path.increments(done, done + m).tolist()):
            q, s, ssp = terms(x)
            noise = s * dw + 0.5 * ssp * (dw * dw - dt)
            pred = x + q * dt + noise
            x = x + 0.5 * (q + terms(pred)[0]) * dt + noise if trap else pred
            if (done + i + 1) % record_every == 0:
                out[k] = obs(x)
                k += 1
        if not math.isfinite(x):
            raise FloatingPointError(f"trajectory overflowed near step {done + m}")
        done += m
    return out[:k]


def _rate_observable(model: DiffusionModel) -> Callable[[float], float]:
    mf = model.m.scalar_fn or (lambda v: float(model.m(v)))
    if model.sigma.kind == "const":
        c = 2.0 / model.sigma.params["value"] ** 2
        return lambda v: c * mf(v) ** 2
    sf = model.sigma.scalar_fn or (lambda v: float(model.sigma(v)))
    return lambda v: 2.0 * (mf(v) / sf(v)) ** 2


def _gamma(model: DiffusionModel, table: MeasureTable | None) -> tuple[float, MeasureTable]:
    table = table or build_measures(model)
    return table.gamma.require(), table


def gamma_birkhoff(
    model: DiffusionModel,
    seed: int,
    T: float | None = None,
    burn_in: float | None = None,
    dt: float = 1e-3,
    table: MeasureTable | None = None,
) -> EstimateReport:
    """Time average of ``2 m^2/sigma^2`` along one forward trajectory after burn-in."""
    gamma, table = _gamma(model, table)
    burn_in = 10.0 / gamma if burn_in is None else burn_in
    T = max(1000.0, 1000.0 / gamma) if T is None else T
    T = round(T / dt) * dt
    burn = round(burn_in / dt) * dt
    if not T > 5 * burn:
        raise ValueError("T must be well beyond the burn-in")
    vals = scalar_trajectory(model, seed, T, dt, observe=_rate_observable(model))
    mean, se = batch_means(vals[to_steps(burn, dt):])
    return EstimateReport(mean, se, len(vals), "birkhoff", {"burn_in": burn, "T": T, "dt": dt, "batches": N_BATCHES})


def occupation_vs_invariant(
    model: DiffusionModel,
    seed: int,
    T: float,
    n_bins: int = 50,
    burn_in: float | None = None,
    stride: float | None = None,
    dt: float = 1e-3,
    table: MeasureTable | None = None,
) -> EstimateReport:
    """KS distance between thinned trajectory samples and the invariant CDF, plus histogram vs density."""
    gamma, table = _gamma(model, table)
    burn_in = 10.0 / gamma if burn_in is None else burn_in
    stride = 1.0 / gamma if stride is None else stride
    every = max(1, round(stride / dt))
    xs = scalar_trajectory(model, seed, T, dt, record_every=every)
    xs = xs[int(math.ceil(burn_in / (every * dt))):]
    ks = ks_distance(xs, (table.x, table.pi_cdf))
    lo, hi = np.quantile(xs, [0.001, 0.999])
    span = max(abs(lo), abs(hi))
    hist, edges = np.histogram(xs, bins=n_bins, range=(-span, span), density=True)
    centers = 0.5 * (edges[1:] + edges[:-1])
    # smoothed density for peak locations; histogram argmax is too noisy per bin
    grid = np.linspace(-span, span, 2001)
    kde = gaussian_kde(xs)(grid)
    return EstimateReport(
        ks, 0.0, len(xs), "occupation",
        {
            "ks": ks,
            "ks_critical_iid": ks_critical(len(xs)),
            "stride": every * dt,
            "burn_in": burn_in,
            "bin_centers": centers.tolist(),
            "histogram": hist.tolist(),
            "density": table.pdf(centers).tolist(),
            "peaks": density_peaks(grid, kde),
            "invariant_peaks": density_peaks(table.x, table.pi_pdf),
            "samples": xs,
        },
    )


def density_peaks(x: np.ndarray, y: np.ndarray) -> list[float]:
    """Locations of the highest point on each side of 0 (for bimodal comparisons)."""
    x = np.asarray(x)
    y = np.asarray(y)
    out = []
    for mask in (x < 0, x > 0):
        if mask.any():
            out.append(float(x[mask][np.argmax(y[mask])]))
    return out


# two-point focusing


def _log_sub(la, lb):
    """``ln(e^la - e^lb)`` for ``la >= lb``."""
    with np.errstate(divide="ignore", invalid="ignore"):
        return la + np.log1p(-np.exp(lb - la))


def two_point_rate(
    model: DiffusionModel,
    seeds,
    a: float,
    b: float,
    T: float,
    dt: float = 1e-3,
    table: MeasureTable | None = None,
    record_dt: float = 0.01,
    scheme: str = DEFAULT_SCHEME,
    zero_noise: bool = False,
) -> EstimateReport:
    """Slope of ``ln(s(X_t(b)) - s(X_t(a)))`` over ``[T/2, T]`` under shared noise, averaged over seeds.

    The log gap is evaluated directly by quadrature of ``s'`` between the
    two positions. If the positions become indistinguishable in floating
    point the curve continues with the one-point log-Jacobian; that must not
    happen before ``T/2``. The clock ``M_t = int F^2 dt`` with
    ``F = (s' sigma)(X(b)) - (s' sigma)(X(a))) / (B - A)`` is accumulated as a diagnostic.
    """
    if not a < b:
        raise ValueError("need a < b")
    gamma, table = _gamma(model, table)
    seeds = np.atleast_1d(np.asarray(seeds))
    if T < 20.0 / gamma - 1e-9:
        raise ValueError(f"T must be at least 20/gamma = {20 / gamma:.4g}")
    path = NoisePath(seeds, dt, zero=zero_noise)
    n = to_steps(T, dt)
    every = max(1, round(record_dt / dt))
    ens = new_ensemble(path, [a, b], log_jacobian=True)
    K = len(seeds)
    times, curve = [], []
    clock = np.zeros(K)
    collapsed = np.zeros(K, dtype=bool)
    collapse_time = np.full(K, np.nan)
    anchor = np.zeros(K)
    min_gap = np.full(K, np.inf)
    log_lam = table.log_lambda
    spline = table._inner_spline

    def log_gap(xa, xb):
        return table.log_scale_gap(xa, xb)

    L = log_gap(ens.x[0], ens.x[1])
    times.append(0.0)
    curve.append(L.copy())
    for k0 in range(0, n, every):
        m = min(every, n - k0)
        # log-Jacobian of member a carries the continuation once collapsed
        accumulate_log_jacobian(model, path, ens, m, scheme)
        xa, xb = ens.x
        gap = xb - xa
        newly = ~collapsed & (gap <= 1e-12 * np.maximum(1.0, np.abs(xa)))
        if newly.any():
            if ens.t < T / 2:
                raise NonConvergenceError(
                    f"pair collapsed to the float floor at t={ens.t:.4g} < T/2; shrink T or dt",
                    {"seeds": seeds[newly].tolist()},
                )
            anchor[newly] = curve[-1][newly] - ens.log_jac[0][newly]
            collapsed |= newly
            collapse_time[newly] = ens.t
        min_gap = np.where(collapsed, min_gap, np.minimum(min_gap, gap))
        with np.errstate(invalid="ignore", divide="ignore"):
            L_direct = log_gap(xa, np.where(collapsed, xa + 1.0, xb))
        L = np.where(collapsed, anchor + ens.log_jac[0], L_direct)
        # clock F^2 (left rectangle over the recording stride)
        ia, ib = spline(xa), spline(xb)
        with np.errstate(invalid="ignore", divide="ignore"):
            F = np.exp(log_lam + _log_sub(-np.minimum(ia, ib), -np.maximum(ia, ib)) - L) * np.sign(ia - ib)
        F_lim = -2 * model.m(xa) / model.sigma(xa)
        F = np.where(collapsed | ~np.isfinite(F), F_lim, F)
        clock += F**2 * m * dt
        times.append(ens.t)
        curve.append(L.copy())
    t = np.asarray(times)
    Y = np.asarray(curve)
    sel = t >= T / 2 - 1e-12
    X = np.vstack([t[sel], np.ones(sel.sum())]).T
    coef, *_ = np.linalg.lstsq(X, Y[sel], rcond=None)
    slopes = coef[0]
    fit = X @ coef
    ss_res = ((Y[sel] - fit) ** 2).sum(axis=0)
    ss_tot = ((Y[sel] - Y[sel].mean(axis=0)) ** 2).sum(axis=0)
    r2 = 1 - ss_res / ss_tot
    if K > 1:
        se = float(slopes.std(ddof=1) / math.sqrt(K))
    else:
        dof = max(sel.sum() - 2, 1)
        se = float(math.sqrt(ss_res[0] / dof / ((t[sel] - t[sel].mean()) ** 2).sum()))
    return EstimateReport(
        float(slopes.mean()), se, K, "two_point",
        {
            "slopes": slopes.tolist(),
            "r2": r2.tolist(),
            "gamma": gamma,
            "clock": clock.tolist(),
            "min_gap": min_gap.tolist(),
            "gap_positive": bool(np.all(min_gap > 0) and np.all(np.isfinite(Y))),
            "collapsed": collapsed.tolist(),
            "collapse_time": collapse_time.tolist(),
            "times": t,
            "log_gap": Y,
        },
    )


# exit probabilities


def exit_probability(
    model: DiffusionModel,
    x0,
    n_paths: int,
    horizon: float | None = None,
    dt: float = 1e-3,
    seed: int = 0,
    escape_threshold: float | None = None,
    table: MeasureTable | None = None,
    scheme: str = DEFAULT_SCHEME,
    chunk: int = 256,
    max_undecided: float = 0.05,
) -> list[EstimateReport]:
    """Fraction of sharp paths escaping to ``+inf`` from each start in ``x0``.

    All starts share the same ``n_paths`` seeds (``seed*n_paths + i``).
    Seeds whose members have all escaped are dropped from the working set.
    """
    gamma, table = _gamma(model, table)
    horizon = round(40.0 / gamma / dt) * dt if horizon is None else horizon
    thr = default_escape_threshold(table) if escape_threshold is None else escape_threshold
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    seeds = np.int64(seed) * n_paths + np.arange(n_paths, dtype=np.int64)
    status = np.zeros((len(x0), n_paths), dtype=np.int8)
    x = np.repeat(x0[:, None], n_paths, axis=1)
    live = np.arange(n_paths)
    n = to_steps(horizon, dt)
    j = 0
    with np.errstate(over="ignore", invalid="ignore"):
        while j < n and len(live):
            m = min(chunk, n - j)
            dws = NoisePath(seeds[live], dt).increments(j, j + m)
            xs = x[:, live]
            st = status[:, live]
            for dw in dws:
                alive = st == 0
                new = step(model, xs, dw, dt, -1, scheme)
                new = np.where(np.isfinite(new), new, np.sign(xs) * np.inf)
                esc = alive & (np.abs(new) > thr)
                st = np.where(esc, np.sign(new).astype(np.int8), st)
                xs = np.where(alive, new, xs)
            x[:, live] = xs
            status[:, live] = st
            j += m
            live = live[np.any(st == 0, axis=0)]
    pi = table.cdf(x0)
    reports = []
    for i, xi in enumerate(x0):
        up = np.count_nonzero(status[i] == 1)
        und = np.count_nonzero(status[i] == 0)
        p = up / n_paths
        se = math.sqrt(max(p * (1 - p), 1.0 / n_paths) / n_paths)
        frac_und = und / n_paths
        diag = {"x0": float(xi), "pi_cdf": float(pi[i]), "undecided": frac_und, "horizon": horizon,
                "escape_threshold": thr, "z_score": (p - float(pi[i])) / se}
        if frac_und > max_undecided:
            raise NonConvergenceError(f"undecided fraction {frac_und:.3f} at x0={xi:g} exceeds {max_undecided}", diag)
        reports.append(EstimateReport(p, se, n_paths, "exit_probability", diag))
    return reports
