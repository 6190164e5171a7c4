"""Pullback constructions of the stagnation point and the residual of the backward equation.

Three routes to the same random point on one noise path:

* ``reversed``: run the forward flow on the time-reversed positive side,
  ``X_down_T(x)``, and let ``T`` grow;
* ``forward_from_minus_T``: start at time ``-T`` on the negative side and
  integrate to 0;
* ``bisection``: locate the start whose sharp trajectory escapes to neither
  infinity.

``reversed`` on a path and ``forward_from_minus_T`` on its rotation read
identical increments, so their cross-check goes through :func:`rotated_view`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .coeffs import CoefficientFunction, DiffusionModel, from_expression
from .flow import (
    DEFAULT_SCHEME,
    NonConvergenceError,
    _sharp_status,
    ksection,
    new_ensemble,
    step,
    step_forward,
    step_sharp,
)
from .measures import build_measures, default_escape_threshold
from .noise import NoisePath, reversed_view, shifted_view, to_steps

DEFAULT_PROBES = (-3.0, 0.0, 3.0)
DEFAULT_TOL = 1e-4
DEFAULT_BISECT_TOL = 1e-6


@dataclass
class PullbackRun:
    """Per-seed pullback values over a horizon schedule.

    ``values[T]`` has shape ``(P,) + batch``; ``T_used``/``spread``/``drift``
    are per seed; ``converged`` is False where the schedule ran out.
    """

    model: DiffusionModel
    method: str
    T_schedule: tuple
    x0s: np.ndarray
    values: dict = field(default_factory=dict)
    xinf_estimate: np.ndarray | float = None
    T_used: np.ndarray = None
    spread: np.ndarray = None
    drift: np.ndarray = None
    converged: np.ndarray = None

    def diagnostics(self) -> dict:
        return {
            "method": self.method,
            "T_schedule": list(self.T_schedule),
            "T_used": np.asarray(self.T_used).tolist(),
            "spread": np.asarray(self.spread).tolist(),
            "drift": np.asarray(self.drift).tolist(),
            "converged": np.asarray(self.converged).tolist(),
        }


def pullback_map(model: DiffusionModel, path, T: float, x0s, scheme: str = DEFAULT_SCHEME) -> np.ndarray:
    """``X_down_T(x0)``: the forward scheme driven by ``b_down_T(t) = b(T - t) - b(T)``."""
    view = reversed_view(path, T)
    ens = new_ensemble(view, x0s)
    step_forward(model, view, ens, to_steps(T, path.dt), scheme)
    return ens.x


def pullback_process(model: DiffusionModel, path, T: float, x0s, scheme: str = DEFAULT_SCHEME) -> np.ndarray:
    """Value at time 0 of the forward flow started at time ``-T`` from ``x0s``."""
    ens = new_ensemble(path, x0s, t0=-T)
    step_forward(model, path, ens, to_steps(T, path.dt), scheme)
    return ens.x


def default_schedule(gamma: float, t_min: float = 1.0) -> tuple:
    t_max = max(10.0, 20.0 / gamma)
    sched = []
    t = t_min
    while t < t_max:
        sched.append(t)
        t *= 2
    sched.append(t_max)
    return tuple(sched)


def _snap(t: float, dt: float) -> float:
    return round(t / dt) * dt


def xinf_on_path(
    model: DiffusionModel,
    path,
    x0s=DEFAULT_PROBES,
    T_schedule=None,
    tol: float = DEFAULT_TOL,
    gamma: float | None = None,
    strict: bool = True,
    scheme: str = DEFAULT_SCHEME,
    method: str = "reversed",
) -> PullbackRun:
    """Grow ``T`` along the schedule until the probe spread and the horizon-to-horizon drift are below ``tol``.

    Seeds of a batched path are retired as soon as they converge. The
    estimate is the median over probes at the first converged horizon.
    """
    x0s = np.asarray(x0s, dtype=float)
    if len(x0s) < 3:
        raise ValueError("need at least 3 probe starts")
    if T_schedule is None:
        if gamma is None:
            gamma = build_measures(model).gamma.require()
        T_schedule = default_schedule(gamma)
    T_schedule = tuple(_snap(t, path.dt) for t in T_schedule)
    if any(b <= a for a, b in zip(T_schedule, T_schedule[1:])):
        raise ValueError("T_schedule must be increasing")
    runner = pullback_map if method == "reversed" else pullback_process

    seeds = np.asarray(getattr(path, "seed", 0))
    batched = isinstance(path, NoisePath) and seeds.ndim == 1
    shape = path.batch_shape
    est = np.full(shape, np.nan)
    T_used = np.full(shape, np.nan)
    spread = np.full(shape, np.inf)
    drift = np.full(shape, np.inf)
    done = np.zeros(shape, dtype=bool)
    prev = None
    run = PullbackRun(model, method, T_schedule, x0s)
    for T in T_schedule:
        if batched:
            idx = np.flatnonzero(~done)
            sub = NoisePath(seeds[idx], path.dt, zero=path.zero)
            vals = np.full((len(x0s),) + shape, np.nan)
            vals[:, idx] = runner(model, sub, T, x0s, scheme)
        else:
            vals = runner(model, path, T, x0s, scheme)
        run.values[T] = vals
        med = np.median(vals, axis=0)
        sp = vals.max(axis=0) - vals.min(axis=0)
        dr = np.abs(med - prev) if prev is not None else np.full(shape, np.inf)
        new = ~done & (sp < tol) & (dr < tol)
        live = ~done
        spread = np.where(live, sp, spread)
        drift = np.where(live, dr, drift)
        est = np.where(new, med, est)
        T_used = np.where(live, T, T_used)
        done = done | new
        prev = med
        if np.all(done):
            break
    run.xinf_estimate = est if np.ndim(est) else float(est)
    run.T_used, run.spread, run.drift, run.converged = T_used, spread, drift, done
    if strict and not np.all(done):
        raise NonConvergenceError(
            f"pullback did not converge by T={T_schedule[-1]:g}: spread {np.max(spread[~done]):.3e}, "
            f"drift {np.max(drift[~done]):.3e}, tol {tol:g}",
            run.diagnostics(),
        )
    if not strict:
        run.xinf_estimate = np.where(done, est, prev) if np.ndim(est) else float(est if done else prev)
    return run


def sample_xinf(model: DiffusionModel, seed, x0s=DEFAULT_PROBES, T_schedule=None, tol=DEFAULT_TOL, dt=1e-3, **kw):
    """Stagnation point for ``seed`` (or an array of seeds) by reversed-noise pullback."""
    run = xinf_on_path(model, NoisePath(seed, dt), x0s, T_schedule, tol, **kw)
    return run.xinf_estimate, run


def stagnation_bisect(
    model: DiffusionModel,
    path,
    horizon: float,
    bracket=None,
    tol: float = DEFAULT_BISECT_TOL,
    escape_threshold: float | None = None,
    scheme: str = DEFAULT_SCHEME,
    k: int = 64,
):
    """Start point separating sharp escapes to ``-inf`` from escapes to ``+inf`` by ``horizon``.

    The default bracket spans the invariant law's 1e-12 tail quantiles.
    Returns ``(midpoint, BisectionResult)``; vectorized over a seed batch.
    """
    if escape_threshold is None or bracket is None:
        table = build_measures(model)
        if escape_threshold is None:
            escape_threshold = default_escape_threshold(table)
        if bracket is None:
            bracket = (float(table.x[np.searchsorted(table.pi_cdf, 1e-12)]),
                       float(table.x[np.searchsorted(table.pi_cdf, 1 - 1e-12)]))
    shape = path.batch_shape
    lo = np.broadcast_to(np.asarray(bracket[0], dtype=float), shape).copy()
    hi = np.broadcast_to(np.asarray(bracket[1], dtype=float), shape).copy()

    def status(xs):
        return _sharp_status(model, path, xs, horizon, escape_threshold, scheme)

    res = ksection(status, lo, hi, tol, k)
    mid = res.midpoint
    return (mid if np.ndim(mid) else float(mid)), res


def sharp_from(model: DiffusionModel, path, x0, t: float, scheme: str = DEFAULT_SCHEME, escape_threshold: float = 1e12):
    """Sharp flow of ``x0`` (array matching the path batch) over ``[0, t]``."""
    x0 = np.asarray(x0, dtype=float)
    ens = new_ensemble(path, [0.0])
    ens.x = x0.reshape(ens.x.shape).copy()
    step_sharp(model, path, ens, to_steps(t, path.dt), escape_threshold, scheme)
    return ens.x[0], ens.status[0]


def invariant_point_check(
    model: DiffusionModel,
    seed,
    t_shift: float,
    tol: float = DEFAULT_TOL,
    dt: float = 1e-3,
    T_schedule=None,
    scheme: str = DEFAULT_SCHEME,
):
    """``|X_sharp_t(xinf(b)) - xinf(theta_t b)|`` per seed, plus both sides for inspection."""
    path = NoisePath(seed, dt)
    gamma = build_measures(model).gamma.require()
    left = xinf_on_path(model, path, T_schedule=T_schedule, tol=tol, gamma=gamma, scheme=scheme).xinf_estimate
    if to_steps(t_shift, dt) == 0:
        return np.zeros(np.shape(left)) if np.ndim(left) else 0.0, left, left
    moved, status = sharp_from(model, path, left, t_shift, scheme)
    if np.any(status != 0):
        raise NonConvergenceError("sharp trajectory from the stagnation point escaped")
    right = xinf_on_path(
        model, shifted_view(path, t_shift), T_schedule=T_schedule, tol=tol, gamma=gamma, scheme=scheme
    ).xinf_estimate
    return np.abs(moved - right), moved, right


# backward equation residual


class GridTooCoarseError(ValueError):
    pass


def _as_function(f) -> CoefficientFunction:
    if isinstance(f, CoefficientFunction):
        return f
    if isinstance(f, str):
        return from_expression(f)
    raise TypeError("f must be an expression string or a CoefficientFunction")


def _residual_table(model, path, f, x_grid, T, scheme, dx):
    dt = path.dt
    n = to_steps(T, dt)
    d = path.increments(0, n)
    if d.ndim != 1:
        raise ValueError("spde_residual needs a single-seed path")
    starts = x_grid[:, None] + dx[:, None] * np.array([-1.0, 0.0, 1.0])
    # row r holds X_down at horizon (r+1) dt; step i drives rows r >= i with -d(r - i)
    y = np.broadcast_to(starts, (n,) + starts.shape).copy()
    with np.errstate(over="ignore", invalid="ignore"):
        for i in range(n):
            dw = -d[: n - i].reshape(-1, 1, 1)
            y[i:] = step(model, y[i:], dw, dt, 1, scheme)
    u = np.concatenate([f(starts)[None], f(y)])           # (n+1, G, 3): horizons 0..n
    du = (u[..., 2] - u[..., 0]) / (2 * dx)
    d2u = (u[..., 2] - 2 * u[..., 1] + u[..., 0]) / dx**2
    sig = model.sigma(x_grid)
    gen = 0.5 * sig**2 * d2u + model.q(x_grid) * du
    stoch = np.concatenate([np.zeros((1, len(x_grid))), np.cumsum(du[:-1] * d[:, None], axis=0)])
    drift = np.concatenate([np.zeros((1, len(x_grid))), np.cumsum(gen[:-1] * dt, axis=0)])
    resid = u[..., 1] - f(x_grid) + sig * stoch - drift
    return np.sqrt(np.mean(resid**2, axis=1))


def spde_residual(
    model: DiffusionModel,
    path,
    f,
    x_grid,
    T: float,
    scheme: str = "milstein",
    dx_rel: float = 1e-3,
    check_grid: bool = True,
):
    """RMS over ``x_grid`` of ``u(t,x) - f(x) + sigma(x) int du/dx db - int G u dt`` at each grid time.

    ``u(t, x) = f(X_down_t(x))`` is tabulated for every horizon on the grid;
    x-derivatives are central differences with step ``dx_rel * max(1, |x|)``,
    the stochastic integral is a left-point sum against forward increments.
    Returns ``(t, rms)``.
    """
    f = _as_function(f)
    x_grid = np.asarray(x_grid, dtype=float)
    dx = dx_rel * np.maximum(1.0, np.abs(x_grid))
    rms = _residual_table(model, path, f, x_grid, T, scheme, dx)
    if check_grid:
        finer = _residual_table(model, path, f, x_grid, T, scheme, dx / 2)
        a, b = rms[-1], finer[-1]
        floor = 1e-8 * (1.0 + float(np.max(np.abs(f(x_grid)))))  # round-off in the differences
        if max(a, b) > floor and abs(a - b) > 0.5 * max(a, b):
            raise GridTooCoarseError(
                f"residual changes from {a:.3e} to {b:.3e} when dx is halved; x-discretization dominates"
            )
    return path.dt * np.arange(len(rms)), rms
