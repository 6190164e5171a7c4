"""Counter-based two-sided Brownian increments and their grid views.

Increment ``i`` on side ``+1`` or ``-1`` is a pure function of
``(seed, side, i)``: a SplitMix64 hash of the counter is turned into a
uniform in (0, 1) and pushed through the normal inverse CDF. Nothing is
stored, so horizons can be extended and views read in any order without
changing a single bit.

All paths and views share one indexing convention: ``increments(j0, j1)``
returns ``d(j) = b((j+1) dt) - b(j dt)`` for signed grid indices
``j0 <= j < j1``. For ``j < 0`` this is ``-db_minus[-j-1]`` because the two
sides are glued as ``b(t) = b_minus(-t)`` for ``t <= 0``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtri

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_SIDE_SALT = {1: np.uint64(0x5851F42D4C957F2D), -1: np.uint64(0x14057B7EF767814F)}
_U53 = 2.0**-53

GRID_TOL = 1e-12


class GridError(ValueError):
    """A time argument does not fall on the dt grid."""


def _mix(z: np.ndarray) -> np.ndarray:
    z = z.copy()
    z ^= z >> np.uint64(30)
    z *= _M1
    z ^= z >> np.uint64(27)
    z *= _M2
    z ^= z >> np.uint64(31)
    return z


def side_keys(seeds, side: int) -> np.ndarray:
    """Per-seed stream keys for one side of the path."""
    with np.errstate(over="ignore"):
        s = np.asarray(seeds, dtype=np.int64).astype(np.uint64)
        return _mix(_mix(s) ^ _SIDE_SALT[side])


def standard_normals(keys: np.ndarray, i0: int, i1: int) -> np.ndarray:
    """Standard normal variates for counters ``i0..i1-1``; shape ``(i1-i0,) + keys.shape``."""
    counters = np.arange(i0 + 1, i1 + 1, dtype=np.uint64).reshape((-1,) + (1,) * keys.ndim)
    with np.errstate(over="ignore"):
        word = _mix(keys + counters * _GOLDEN)
    u = ((word >> np.uint64(11)).astype(np.float64) + 0.5) * _U53
    return ndtri(u)


def to_steps(t: float, dt: float) -> int:
    """Number of grid steps in ``t``; raises if ``t`` is off the grid."""
    n = round(t / dt)
    if abs(n * dt - t) > GRID_TOL * max(1.0, abs(t)):
        raise GridError(f"time {t!r} is not a multiple of dt={dt!r}")
    return int(n)


class NoisePath:
    """Two-sided Brownian path on a fixed grid, for one seed or a batch of seeds.

    With a scalar seed ``increments`` returns shape ``(n,)``; with an array of
    seeds it returns ``(n, K)``, one column per seed. ``zero=True`` gives the
    all-zero debug path.
    """

    def __init__(self, seed, dt: float, zero: bool = False):
        if not dt > 0:
            raise ValueError("dt must be positive")
        self.seed = seed
        self.dt = float(dt)
        self.zero = zero
        self._shape = np.shape(seed)
        self._keys = {side: side_keys(seed, side) for side in (1, -1)}
        self.horizon_plus = 0.0
        self.horizon_minus = 0.0

    @classmethod
    def zeros(cls, dt: float, seed=0) -> "NoisePath":
        return cls(seed, dt, zero=True)

    @property
    def batch_shape(self) -> tuple:
        return self._shape

    def extend(self, t_plus: float = 0.0, t_minus: float = 0.0) -> "NoisePath":
        """Record larger horizons. Existing increments are unaffected by construction."""
        self.horizon_plus = max(self.horizon_plus, to_steps(t_plus, self.dt) * self.dt)
        self.horizon_minus = max(self.horizon_minus, to_steps(t_minus, self.dt) * self.dt)
        return self

    def side(self, side: int, i0: int, i1: int) -> np.ndarray:
        """Raw increments ``db_side[i0:i1]`` (each Normal(0, dt))."""
        if i0 < 0 or i1 < i0:
            raise IndexError(f"bad counter range [{i0}, {i1})")
        if self.zero:
            return np.zeros((i1 - i0,) + self._shape)
        return standard_normals(self._keys[side], i0, i1) * math.sqrt(self.dt)

    def increments(self, j0: int, j1: int) -> np.ndarray:
        if j1 < j0:
            raise IndexError(f"bad index range [{j0}, {j1})")
        parts = []
        if j0 < 0:
            # d(j) = -db_minus[-j-1] for j in [j0, min(j1, 0))
            hi = min(j1, 0)
            parts.append(-self.side(-1, -hi, -j0)[::-1])
        if j1 > 0:
            parts.append(self.side(1, max(j0, 0), j1))
        if not parts:
            return np.zeros((0,) + self._shape)
        self.horizon_plus = max(self.horizon_plus, j1 * self.dt)
        self.horizon_minus = max(self.horizon_minus, -j0 * self.dt)
        return parts[0] if len(parts) == 1 else np.concatenate(parts)

    def b(self, j: int) -> np.ndarray:
        """``b(j dt)`` by summing increments from 0."""
        return self.increments(0, j).sum(axis=0) if j >= 0 else -self.increments(j, 0).sum(axis=0)


@dataclass(frozen=True)
class PathView:
    """Read-only affine reindexing of a base path: ``d_view(j) = sign * d_base(scale*j + offset)``."""

    base: object
    scale: int
    offset: int
    sign: int

    @property
    def dt(self) -> float:
        return self.base.dt

    @property
    def zero(self) -> bool:
        return self.base.zero

    @property
    def batch_shape(self) -> tuple:
        return self.base.batch_shape

    def increments(self, j0: int, j1: int) -> np.ndarray:
        if self.scale == 1:
            out = self.base.increments(j0 + self.offset, j1 + self.offset)
        else:
            out = self.base.increments(self.offset - j1 + 1, self.offset - j0 + 1)[::-1]
        return out if self.sign == 1 else -out

    def b(self, j: int) -> np.ndarray:
        return self.increments(0, j).sum(axis=0) if j >= 0 else -self.increments(j, 0).sum(axis=0)


def _compose(path, scale: int, offset: int, sign: int) -> PathView:
    """View of ``path`` with ``d(j) -> sign * d_path(scale*j + offset)``, flattening nested views."""
    if isinstance(path, PathView):
        return PathView(path.base, path.scale * scale, path.scale * offset + path.offset, path.sign * sign)
    return PathView(path, scale, offset, sign)


def reversed_view(path, T: float) -> PathView:
    """Increments of ``b_down(t) = b(T - t) - b(T)`` on ``[0, T]``: the i-th is ``-d(N-1-i)``."""
    n = to_steps(T, path.dt)
    return _compose(path, -1, n - 1, -1)


def shifted_view(path, t0: float) -> PathView:
    """Increments of ``theta_{t0} b``: ``d(j + t0/dt)``; ``t0`` may be negative."""
    return _compose(path, 1, to_steps(t0, path.dt), 1)


def rotated_view(path) -> PathView:
    """Path ``t -> b(-t)``: sides swapped and time reflected, ``d(j) -> -d(-j-1)``."""
    return _compose(path, -1, -1, -1)


def dump_rows(path: NoisePath, n: int):
    """``(index, side, increment)`` rows for the first ``n`` increments on each side (scalar seed)."""
    for side, label in ((1, "+"), (-1, "-")):
        vals = path.side(side, 0, n)
        for i, v in enumerate(vals):
            yield i, label, float(v)
