"""Integration of the forward flow, the sharp flow and the log-Jacobian.

An :class:`Ensemble` is a set of initial points driven by one noise path
(or one path per column when the path carries a batch of seeds). Member
arrays have shape ``(P,)`` for a single path or ``(P, K)`` for ``K`` seeds;
the increment for one step has shape ``()`` or ``(K,)`` and broadcasts.

Two schemes are available. ``"milstein"`` is the Ito-Milstein step with
modified drift ``q = m + sigma sigma'/2``. ``"milstein_trapezoid"`` keeps
the Milstein noise terms but averages the drift at the current point and
at the Milstein predictor; for additive noise this is Heun's method, whose
one-step map is inverted to O(dt^3) by the same step under reversed noise.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .coeffs import DiffusionModel
from .noise import to_steps

log = logging.getLogger(__name__)

SCHEMES = ("milstein", "milstein_trapezoid")
DEFAULT_SCHEME = "milstein_trapezoid"
ALIVE = 0
CHUNK = 2048


class FlowOverflowError(FloatingPointError):
    def __init__(self, member, step: int):
        super().__init__(f"non-finite state for member {member} at step {step}")
        self.member = member
        self.step = step


class BracketError(ValueError):
    """A bisection bracket does not show the required escape behavior."""


class NonConvergenceError(RuntimeError):
    """An iterative procedure stopped before reaching its tolerance."""

    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


@dataclass
class Ensemble:
    """Members under one shared path. ``status`` is 0 (alive), +1 or -1 (escaped to +-inf)."""

    x0: np.ndarray
    x: np.ndarray
    dt: float
    j: int = 0                      # signed index of the next increment
    steps: int = 0
    status: np.ndarray = None
    escape_time: np.ndarray = None
    log_jac: np.ndarray | None = None
    clock: np.ndarray | None = None
    order_violations: int = 0
    _order: np.ndarray = field(default=None, repr=False)

    @property
    def t(self) -> float:
        return self.steps * self.dt

    @property
    def alive(self) -> np.ndarray:
        return self.status == ALIVE


def new_ensemble(path, x0, t0: float = 0.0, batch_shape: tuple | None = None, log_jacobian: bool = False) -> Ensemble:
    """Members at ``x0`` (shape ``(P,)``), broadcast over the path's seed batch, starting at time ``t0``."""
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    shape = path.batch_shape if batch_shape is None else batch_shape
    x = np.broadcast_to(x0.reshape(x0.shape + (1,) * (len(shape) + 1 - x0.ndim)), x0.shape[:1] + tuple(shape)).copy()
    return Ensemble(
        x0=x.copy(),
        x=x,
        dt=path.dt,
        j=to_steps(t0, path.dt),
        status=np.zeros(x.shape, dtype=np.int8),
        escape_time=np.full(x.shape, np.nan),
        log_jac=np.zeros(x.shape) if log_jacobian else None,
        _order=np.argsort(x, axis=0, kind="stable"),
    )


def step(model: DiffusionModel, x, dw, dt: float, sign: int = 1, scheme: str = DEFAULT_SCHEME):
    """One step of ``dX = sigma o db + sign*m dt``."""
    q, s, ssp = model.drift_terms(x, sign)
    noise = s * dw + 0.5 * ssp * (dw * dw - dt)
    pred = x + q * dt + noise
    if scheme == "milstein":
        return pred
    if scheme == "milstein_trapezoid":
        q2 = model.drift_terms(pred, sign)[0]
        return x + 0.5 * (q + q2) * dt + noise
    raise ValueError(f"unknown scheme {scheme!r}; choose from {SCHEMES}")


def log_jacobian_increment(model: DiffusionModel, x, dw, dt: float):
    """Increment of ``-2 int m/sigma db - 2 int m^2/sigma^2 dt`` over one step.

    The stochastic integral is the left-point Ito sum plus its Milstein term
    ``g' sigma (dw^2 - dt)/2`` with ``g = -2m/sigma``.
    """
    m = model.m(x)
    dm = model.m.derivative(x, 1)
    s = model.sigma(x)
    ds = model.sigma.derivative(x, 1)
    g = -2 * m / s
    dg = -2 * (dm * s - m * ds) / s**2
    return g * dw + 0.5 * dg * s * (dw * dw - dt) - 0.5 * g * g * dt


def _advance(
    model: DiffusionModel,
    path,
    ens: Ensemble,
    n_steps: int,
    sign: int,
    scheme: str,
    escape_threshold: float | None,
    log_jacobian: bool,
    check_order: bool,
) -> Ensemble:
    if not model.is_positive_recurrent:
        raise ValueError(f"model {model.name!r} is not validated positive recurrent")
    if log_jacobian and ens.log_jac is None:
        ens.log_jac = np.zeros(ens.x.shape)
    dt = ens.dt
    done = 0
    with np.errstate(over="ignore", invalid="ignore"):
        while done < n_steps:
            n = min(CHUNK, n_steps - done)
            dws = path.increments(ens.j, ens.j + n)
            for dw in dws:
                alive = ens.status == ALIVE
                x = ens.x
                new = step(model, x, dw, dt, sign, scheme)
                if log_jacobian:
                    ens.log_jac = np.where(alive, ens.log_jac + log_jacobian_increment(model, x, dw, dt), ens.log_jac)
                ens.steps += 1
                ens.j += 1
                if escape_threshold is not None:
                    bad = ~np.isfinite(new)
                    if bad.any():
                        new = np.where(bad, np.sign(x) * np.inf, new)
                    esc = alive & (np.abs(new) > escape_threshold)
                    if esc.any():
                        ens.status[esc] = np.sign(new[esc]).astype(np.int8)
                        ens.escape_time[esc] = ens.t
                    ens.x = np.where(alive, new, x)
                else:
                    if not np.all(np.isfinite(new[alive])):
                        idx = np.argwhere(~np.isfinite(new) & alive)[0]
                        raise FlowOverflowError(tuple(int(i) for i in idx), ens.steps)
                    ens.x = np.where(alive, new, x)
                if check_order:
                    _check_order(ens)
            done += n
    return ens


def _check_order(ens: Ensemble) -> None:
    xs = np.take_along_axis(ens.x, ens._order, axis=0)
    ok = np.take_along_axis(ens.alive, ens._order, axis=0)
    both = ok[1:] & ok[:-1]
    bad = int(np.count_nonzero((np.diff(xs, axis=0) < 0) & both))
    if bad:
        ens.order_violations += bad
        log.warning("order violated for %d member pairs at step %d (dt=%g too large?)", bad, ens.steps, ens.dt)


def step_forward(model, path, ens, n_steps, scheme=DEFAULT_SCHEME, log_jacobian=False, check_order=False):
    """Advance alive members ``n_steps`` under the forward flow."""
    return _advance(model, path, ens, n_steps, 1, scheme, None, log_jacobian, check_order)


def step_sharp(model, path, ens, n_steps, escape_threshold, scheme=DEFAULT_SCHEME, check_order=False):
    """Advance under the sharp flow (drift ``-m``); members crossing ``+-escape_threshold`` are frozen as escaped."""
    if not escape_threshold > 0:
        raise ValueError("escape_threshold must be positive")
    return _advance(model, path, ens, n_steps, -1, scheme, escape_threshold, False, check_order)


def accumulate_log_jacobian(model, path, ens, n_steps, scheme=DEFAULT_SCHEME):
    """Forward steps that also accumulate ``ln ds(X_t)/dx - ln s'(x0)`` per member."""
    return _advance(model, path, ens, n_steps, 1, scheme, None, True, False)


def stability_bound(model: DiffusionModel, extent: float) -> float:
    """Empirical dt bound ``1 / max |q'|`` over ``[-extent, extent]``, below which steps keep order."""
    x = np.linspace(-extent, extent, 2001)
    dq = np.gradient(model.q(x), x)
    return float(1.0 / max(np.abs(dq).max(), 1e-300))


# bisection on initial points


@dataclass
class BisectionResult:
    lower: np.ndarray
    upper: np.ndarray
    history: list

    @property
    def midpoint(self) -> np.ndarray:
        return 0.5 * (self.lower + self.upper)

    @property
    def width(self) -> np.ndarray:
        return self.upper - self.lower


def _sharp_status(model, path, xs, horizon, escape_threshold, scheme):
    ens = new_ensemble(path, xs[:, 0] if xs.ndim > 1 else xs, batch_shape=path.batch_shape)
    ens.x = np.array(xs, dtype=float).reshape(ens.x.shape)
    ens.x0 = ens.x.copy()
    step_sharp(model, path, ens, to_steps(horizon, path.dt), escape_threshold, scheme)
    return ens.status


def ksection(
    status_fn,
    lo,
    hi,
    tol: float,
    k: int = 64,
    max_rounds: int = 60,
):
    """Shrink ``[lo, hi]`` around the switch from status -1 to +1.

    ``status_fn(xs)`` returns escape signs for a ``(k, ...)`` array of
    starts. Each round keeps the last -1 and the first +1; undecided (0)
    points in between are left inside the new bracket. Works column-wise
    when ``lo``/``hi`` are arrays.
    """
    lo = np.array(lo, dtype=float)
    hi = np.array(hi, dtype=float)
    frac = np.linspace(0.0, 1.0, k).reshape((k,) + (1,) * lo.ndim)
    history = []
    for rnd in range(max_rounds):
        if np.all(hi - lo <= tol):
            break
        xs = lo + (hi - lo) * frac
        st = status_fn(xs)
        history.append({"round": rnd, "lower": lo.copy(), "upper": hi.copy(), "starts": xs, "status": st})
        if rnd == 0:
            if np.any(st[0] != -1) or np.any(st[-1] != 1):
                raise BracketError(
                    "bracket edges must escape to -inf (left) and +inf (right) by the horizon; "
                    f"got {st[0].tolist()} and {st[-1].tolist()}"
                )
        neg = st == -1
        pos = st == 1
        if np.any(np.diff(st.astype(int), axis=0) < 0):
            log.warning("escape sign not monotone in the start point; flow order violated")
        il = k - 1 - np.argmax(neg[::-1], axis=0)
        ir = np.argmax(pos, axis=0)
        new_lo = np.take_along_axis(xs, np.expand_dims(il, 0), 0)[0]
        new_hi = np.take_along_axis(xs, np.expand_dims(ir, 0), 0)[0]
        active = hi - lo > tol
        if np.any(active & (ir - il >= k - 1)):
            raise NonConvergenceError(
                "no start inside the bracket escaped by the horizon; increase it",
                {"lower": lo.tolist(), "upper": hi.tolist()},
            )
        lo = np.where(active, new_lo, lo)
        hi = np.where(active, new_hi, hi)
    else:
        raise NonConvergenceError("k-section did not reach tolerance", {"width": (hi - lo).tolist()})
    return BisectionResult(lo, hi, history)


def domain_endpoints(model, path, t, bracket, tol=1e-6, escape_threshold=None, scheme=DEFAULT_SCHEME, k=64):
    """``(L_t, R_t, flags)``: the sharp flow started outside ``(L_t, R_t)`` has escaped by time ``t``.

    Single seed only. If nothing escapes on a side, that bracket edge is
    returned and ``flags`` records "no explosion observed".
    """
    if escape_threshold is None:
        raise ValueError("escape_threshold is required")
    lo, hi = map(float, bracket)
    if not lo < hi:
        raise BracketError("bracket must satisfy lo < hi")

    def status(xs):
        return _sharp_status(model, path, xs, t, escape_threshold, scheme)

    xs = np.linspace(lo, hi, k)
    st = status(xs)
    if st[0] == 1 or st[-1] == -1:
        raise BracketError("bracket edges escape toward the wrong infinity")
    flags = {}

    def boundary(indicator_sign, increasing):
        ind = st == indicator_sign
        if not ind.any():
            flags["+inf" if indicator_sign == 1 else "-inf"] = "no explosion observed"
            return hi if increasing else lo
        if increasing:
            i = int(np.argmax(ind))
            a, b = (xs[i - 1], xs[i]) if i > 0 else (lo, lo)
        else:
            i = k - 1 - int(np.argmax(ind[::-1]))
            a, b = (xs[i], xs[i + 1]) if i < k - 1 else (hi, hi)
        while b - a > tol:
            grid = np.linspace(a, b, k)
            s = status(grid) == indicator_sign
            if increasing:
                i = int(np.argmax(s))
                a, b = grid[max(i - 1, 0)], grid[i]
            else:
                i = k - 1 - int(np.argmax(s[::-1]))
                a, b = grid[i], grid[min(i + 1, k - 1)]
        return b if increasing else a

    right = boundary(1, True)
    left = boundary(-1, False)
    return float(left), float(right), flags
