"""Closed-form Ornstein-Uhlenbeck references evaluated on the same noise grid.

For ``dX = sigma0 db - beta X dt`` every object of interest is a Gaussian
sum over the path's increments, so comparisons are per path rather than in
law.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .noise import to_steps


@dataclass(frozen=True)
class OuParams:
    beta: float = 1.0
    sigma0: float = 1.0

    def __post_init__(self):
        if not self.beta > 0 or not self.sigma0 > 0:
            raise ValueError("OU needs beta > 0 and sigma0 > 0")

    @property
    def stationary_variance(self) -> float:
        return self.sigma0**2 / (2 * self.beta)


def _weights(beta: float, dt: float, n: int, scale: float = 1.0):
    """``exp(-beta t_i)`` for ``t_i = i dt``, shaped to broadcast against increments."""
    return np.exp(-beta * dt * np.arange(n) * scale)


def ou_exact_flow(params: OuParams, path, x0, T: float):
    """``x0 e^{-beta T} + sigma0 sum_i e^{beta(t_i - T)} db_i`` (left-point weights)."""
    n = to_steps(T, path.dt)
    db = path.increments(0, n)
    t = path.dt * np.arange(n)
    w = np.exp(params.beta * (t - T)).reshape((-1,) + (1,) * (db.ndim - 1))
    return np.asarray(x0) * math.exp(-params.beta * T) + params.sigma0 * (w * db).sum(axis=0)


def ou_exact_xinf(params: OuParams, path, T_max: float):
    """``-sigma0 sum_{t_i < T_max} e^{-beta t_i} db_i`` and the std bound of the dropped tail."""
    if params.beta * T_max < 20:
        raise ValueError("T_max * beta must be at least 20")
    n = to_steps(T_max, path.dt)
    db = path.increments(0, n)
    w = _weights(params.beta, path.dt, n).reshape((-1,) + (1,) * (db.ndim - 1))
    tail = params.sigma0 * math.exp(-params.beta * T_max) / math.sqrt(2 * params.beta)
    return -params.sigma0 * (w * db).sum(axis=0), tail


def ou_stationary_sharp(params: OuParams, path, t: float, T_max: float | None = None):
    """``-sigma0 e^{beta t} sum_{t_i >= t} e^{-beta t_i} db_i``, truncated at ``t + T_max``."""
    T_max = T_max if T_max is not None else 20.0 / params.beta + 5.0
    k = to_steps(t, path.dt)
    n = to_steps(t + T_max, path.dt)
    db = path.increments(k, n)
    ti = path.dt * np.arange(k, n)
    w = np.exp(params.beta * (t - ti)).reshape((-1,) + (1,) * (db.ndim - 1))
    return -params.sigma0 * (w * db).sum(axis=0)


def discrete_xinf_variance(params: OuParams, dt: float, T_max: float) -> float:
    """``sigma0^2 sum_i e^{-2 beta t_i} dt``, the exact variance of the truncated sum."""
    n = to_steps(T_max, dt)
    return params.sigma0**2 * dt * float(np.sum(np.exp(-2 * params.beta * dt * np.arange(n))))


def strong_order(dts, errors) -> float:
    """Least-squares slope of ``log error`` against ``log dt``."""
    return float(np.polyfit(np.log(dts), np.log(errors), 1)[0])
