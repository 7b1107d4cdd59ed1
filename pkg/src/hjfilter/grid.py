"""Rectangular state grids and sampled value tubes.

A :class:`ValueTube` stores ``V(x, tau)`` on a rectangular grid for a set of
time-to-go samples ``tau >= 0`` (forward time is ``t = -tau``). Queries are
multilinear in state and linear in ``tau``.
"""
from __future__ import annotations

import itertools
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

MAGIC = b"S2TV"
FORMAT_VERSION = 1


class HorizonExceeded(ValueError):
    """Raised when a query asks for a time-to-go beyond the stored horizon."""


@dataclass(frozen=True)
class RectGrid:
    lo: np.ndarray
    hi: np.ndarray
    counts: tuple[int, ...]

    def __post_init__(self):
        lo = np.asarray(self.lo, dtype=float).copy()
        hi = np.asarray(self.hi, dtype=float).copy()
        counts = tuple(int(c) for c in self.counts)
        if lo.ndim != 1 or lo.shape != hi.shape or len(counts) != lo.size:
            raise ValueError("lo, hi and counts must have matching length")
        if not np.all(lo < hi):
            raise ValueError(f"grid requires lo < hi, got lo={lo}, hi={hi}")
        if min(counts) < 2:
            raise ValueError(f"grid requires at least 2 points per dimension, got {counts}")
        lo.flags.writeable = False
        hi.flags.writeable = False
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)
        object.__setattr__(self, "counts", counts)

    @property
    def ndim(self) -> int:
        return len(self.counts)

    @property
    def spacing(self) -> np.ndarray:
        return (self.hi - self.lo) / (np.asarray(self.counts) - 1)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.counts

    def axes(self) -> list[np.ndarray]:
        return [np.linspace(l, h, c) for l, h, c in zip(self.lo, self.hi, self.counts)]

    def states(self) -> np.ndarray:
        """All grid nodes as an array of shape ``counts + (ndim,)``."""
        return np.stack(np.meshgrid(*self.axes(), indexing="ij"), axis=-1)

    def contains(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return np.all((x >= self.lo) & (x <= self.hi), axis=-1)

    def clamp(self, x) -> tuple[np.ndarray, np.ndarray]:
        """Clamp points onto the grid box. Returns ``(clamped, was_outside)``."""
        x = np.asarray(x, dtype=float)
        clamped = np.clip(x, self.lo, self.hi)
        return clamped, np.any(clamped != x, axis=-1)

    def refine(self) -> "RectGrid":
        """Grid with the spacing halved in every dimension."""
        return RectGrid(self.lo, self.hi, tuple(2 * c - 1 for c in self.counts))


def _cell_coordinates(grid: RectGrid, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # lower-corner index and fractional offset in [0, 1] per dimension
    counts = np.asarray(grid.counts)
    s = (points - grid.lo) / grid.spacing
    idx = np.clip(np.floor(s).astype(np.int64), 0, counts - 2)
    frac = s - idx
    return idx, frac


def multilinear(grid: RectGrid, data: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Multilinear interpolation of ``data`` (shape ``grid.counts``) at ``points``.

    ``points`` has shape ``(m, ndim)`` and must lie inside the grid box.
    """
    points = np.atleast_2d(points)
    idx, frac = _cell_coordinates(grid, points)
    strides = np.array(data.strides) // data.itemsize
    flat = data.reshape(-1)
    base = idx @ strides
    out = np.zeros(points.shape[0])
    for corner in itertools.product((0, 1), repeat=grid.ndim):
        c = np.asarray(corner)
        w = np.prod(np.where(c == 1, frac, 1.0 - frac), axis=1)
        out += w * flat[base + c @ strides]
    return out


@dataclass(frozen=True)
class ValueTube:
    """Value function samples ``values[k]`` at time-to-go ``taus[k]``."""

    grid: RectGrid
    taus: np.ndarray
    values: np.ndarray
    meta: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        taus = np.array(self.taus, dtype=float)
        values = np.array(self.values, dtype=float)
        if taus.ndim != 1 or taus.size < 1 or taus[0] != 0.0:
            raise ValueError("taus must be a non-empty 1D array starting at 0")
        if np.any(np.diff(taus) <= 0):
            raise ValueError("taus must be strictly increasing")
        if values.shape != (taus.size,) + self.grid.counts:
            raise ValueError(
                f"values shape {values.shape} does not match {(taus.size,) + self.grid.counts}"
            )
        if not np.all(np.isfinite(values)):
            raise ValueError("value tube contains non-finite samples")
        taus.flags.writeable = False
        values.flags.writeable = False
        object.__setattr__(self, "taus", taus)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "meta", dict(self.meta))

    @property
    def horizon(self) -> float:
        return float(self.taus[-1])

    def slice_at(self, tau: float) -> np.ndarray:
        """The full state-grid field at ``tau`` (linear in ``tau``)."""
        k, w = self._tau_bracket(tau)
        if w == 0.0:
            return self.values[k]
        return (1.0 - w) * self.values[k] + w * self.values[k + 1]

    def _tau_bracket(self, tau: float) -> tuple[int, float]:
        tau = float(tau)
        if not np.isfinite(tau):
            raise ValueError("tau must be finite")
        if tau < 0.0:
            raise ValueError(f"tau must be non-negative, got {tau}")
        if tau > self.horizon * (1.0 + 1e-12):
            raise HorizonExceeded(f"horizon exceeded: tau={tau} > {self.horizon}")
        if self.taus.size == 1:
            return 0, 0.0
        k = int(np.clip(np.searchsorted(self.taus, tau, side="right") - 1, 0, self.taus.size - 2))
        w = (min(tau, self.horizon) - self.taus[k]) / (self.taus[k + 1] - self.taus[k])
        return k, float(w)

    def _prepare(self, x) -> tuple[np.ndarray, bool]:
        x = np.asarray(x, dtype=float)
        if x.shape != (self.grid.ndim,):
            raise ValueError(f"state must have shape ({self.grid.ndim},), got {x.shape}")
        if not np.all(np.isfinite(x)):
            raise ValueError("state contains NaN or inf")
        xc, outside = self.grid.clamp(x)
        return xc, bool(outside)

    def _field_at(self, points: np.ndarray, tau: float) -> np.ndarray:
        k, w = self._tau_bracket(tau)
        v = multilinear(self.grid, self.values[k], points)
        if w == 0.0:
            return v
        return (1.0 - w) * v + w * multilinear(self.grid, self.values[k + 1], points)

    def evaluate(self, points, tau: float) -> np.ndarray:
        """Values at many in-grid ``points`` (shape ``(..., ndim)``) at one time-to-go."""
        points = np.asarray(points, dtype=float)
        flat = points.reshape(-1, self.grid.ndim)
        if not np.all(self.grid.contains(flat)):
            raise ValueError("evaluation points must lie inside the grid")
        return self._field_at(flat, tau).reshape(points.shape[:-1])

    def query(self, x, tau: float) -> "TubeQuery":
        """Value, forward-time derivative and spatial gradient in one pass."""
        xc, outside = self._prepare(x)
        k, w = self._tau_bracket(tau)
        n = self.grid.ndim
        h = self.grid.spacing
        plus = np.minimum(xc + h, self.grid.hi)
        minus = np.maximum(xc - h, self.grid.lo)
        pts = np.empty((2 * n + 1, n))
        pts[0] = xc
        for i in range(n):
            pts[1 + 2 * i] = xc
            pts[1 + 2 * i, i] = plus[i]
            pts[2 + 2 * i] = xc
            pts[2 + 2 * i, i] = minus[i]
        if self.taus.size == 1:
            lo_vals = hi_vals = multilinear(self.grid, self.values[0], pts)
            dt_tau = 1.0
        else:
            lo_vals = multilinear(self.grid, self.values[k], pts)
            hi_vals = multilinear(self.grid, self.values[k + 1], pts)
            dt_tau = self.taus[k + 1] - self.taus[k]
        vals = (1.0 - w) * lo_vals + w * hi_vals
        grad = np.empty(n)
        for i in range(n):
            grad[i] = (vals[1 + 2 * i] - vals[2 + 2 * i]) / (plus[i] - minus[i])
        dvdt = -(hi_vals[0] - lo_vals[0]) / dt_tau
        return TubeQuery(value=float(vals[0]), dvdt=float(dvdt), grad=grad, clamped=outside)

    def save(self, path) -> None:
        save_tube(self, path)


@dataclass(frozen=True)
class TubeQuery:
    value: float
    dvdt: float
    grad: np.ndarray
    clamped: bool


def interpolate(tube: ValueTube, x, tau: float) -> float:
    """Multilinear-in-state, linear-in-tau value at ``(x, tau)``."""
    xc, _ = tube._prepare(x)
    return float(tube._field_at(xc[None, :], tau)[0])


def gradient(tube: ValueTube, x, tau: float) -> np.ndarray:
    """Central differences of the interpolated field, one-sided at the grid edge."""
    return tube.query(x, tau).grad


def time_derivative(tube: ValueTube, x, tau: float) -> float:
    """Forward-time derivative dV/dt with t = -tau, from adjacent tau samples."""
    return tube.query(x, tau).dvdt


def save_tube(tube: ValueTube, path) -> None:
    """Write the binary tube file plus a JSON sidecar holding ``meta``."""
    path = Path(path)
    g = tube.grid
    header = bytearray(MAGIC)
    header += struct.pack("<II", FORMAT_VERSION, g.ndim)
    header += struct.pack(f"<{g.ndim}I", *g.counts)
    header += struct.pack(f"<{g.ndim}d", *g.lo)
    header += struct.pack(f"<{g.ndim}d", *g.hi)
    header += struct.pack("<I", tube.taus.size)
    header += np.ascontiguousarray(tube.taus, dtype="<f8").tobytes()
    with open(path, "wb") as fh:
        fh.write(bytes(header))
        fh.write(np.ascontiguousarray(tube.values, dtype="<f8").tobytes(order="C"))
    sidecar_path(path).write_text(json.dumps(tube.meta, sort_keys=True, indent=2) + "\n")


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def load_tube(path) -> ValueTube:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] != MAGIC:
        raise ValueError(f"{path}: not a value tube file (bad magic)")
    off = 4
    version, ndim = struct.unpack_from("<II", raw, off)
    off += 8
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported tube format version {version}")
    counts = struct.unpack_from(f"<{ndim}I", raw, off)
    off += 4 * ndim
    lo = np.array(struct.unpack_from(f"<{ndim}d", raw, off))
    off += 8 * ndim
    hi = np.array(struct.unpack_from(f"<{ndim}d", raw, off))
    off += 8 * ndim
    (ntau,) = struct.unpack_from("<I", raw, off)
    off += 4
    taus = np.frombuffer(raw, dtype="<f8", count=ntau, offset=off)
    off += 8 * ntau
    n = ntau * int(np.prod(counts))
    if len(raw) - off != 8 * n:
        raise ValueError(f"{path}: truncated or oversized value data")
    values = np.frombuffer(raw, dtype="<f8", count=n, offset=off).reshape((ntau,) + tuple(counts))
    meta_file = sidecar_path(path)
    meta = json.loads(meta_file.read_text()) if meta_file.exists() else {}
    return ValueTube(RectGrid(lo, hi, counts), taus, values, meta)
