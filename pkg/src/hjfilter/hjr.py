"""Grid dynamic programming for avoid and reach-avoid value tubes.

The solver marches the Hamilton-Jacobi-Isaacs variational inequality
backwards in time (forwards in time-to-go ``tau``) with a first-order
upwind / local Lax-Friedrichs scheme and explicit Euler steps:

    V <- min(g, max(l, V + dt * H_LF(grad V, x, bound(tau))))

with ``V(., 0) = min(l, g)``. Dropping ``l`` gives the avoid problem.
"""
from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .dynamics import ControlAffineModel, DisturbanceSpec, TimeVaryingDisturbanceSet
from .grid import RectGrid, ValueTube

logger = logging.getLogger(__name__)

DEFAULT_CFL = 0.5
DEFAULT_ARCHIVE_SAMPLES = 50


class CFLViolation(ValueError):
    pass


class NumericalFailure(RuntimeError):
    pass


@dataclass(frozen=True)
class FixedBound:
    """Constant disturbance box half-width."""

    d: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.d, dtype=float)
        if np.any(d < 0):
            raise ValueError("disturbance bound must be non-negative")
        object.__setattr__(self, "d", d)

    def bound(self, tau: float) -> np.ndarray:
        return self.d

    @property
    def max_bound(self) -> np.ndarray:
        return self.d

    def describe(self) -> dict:
        return {"parameterization": "bound", "bound": self.d.tolist()}


@dataclass(frozen=True)
class RateSchedule:
    """Disturbance box that shrinks with time-to-go at a fixed rate."""

    schedule: TimeVaryingDisturbanceSet

    def bound(self, tau: float) -> np.ndarray:
        return self.schedule.bound(tau)

    @property
    def max_bound(self) -> np.ndarray:
        return self.schedule.bound(0.0)

    def describe(self) -> dict:
        return {
            "parameterization": "rate",
            "rate": self.schedule.ddot.tolist(),
            "d_max": self.schedule.d_max.tolist(),
        }


@dataclass(frozen=True)
class ReachAvoidProblem:
    """Everything the solver needs. ``dt=None`` picks the largest CFL-stable step.

    ``dissipation_bound`` sets the disturbance box used for the Lax-Friedrichs
    coefficients (and hence the time step); it defaults to the largest box of
    ``disturbance``. Ensembles share one so their members stay comparable.
    """

    grid: RectGrid
    model: ControlAffineModel
    constraint_fn: Callable[[np.ndarray], np.ndarray]
    disturbance: FixedBound | RateSchedule
    horizon: float
    target_fn: Callable[[np.ndarray], np.ndarray] | None = None
    dt: float | None = None
    cfl: float = DEFAULT_CFL
    archive_samples: int = DEFAULT_ARCHIVE_SAMPLES
    dissipation_bound: np.ndarray | None = None


def dissipation_coefficients(model: ControlAffineModel, states: np.ndarray, d_bound) -> np.ndarray:
    """Grid-wide maxima ``alpha_i = max |dH/dlambda_i|``; these set the stable time step."""
    flat = states.reshape(-1, states.shape[-1])
    return model.flow_magnitude_bounds(flat, d_bound).max(axis=0)


def cfl_time_step(alpha: np.ndarray, spacing: np.ndarray, cfl: float = DEFAULT_CFL) -> float:
    """Largest ``dt`` with ``dt * sum_i alpha_i / h_i <= cfl``."""
    rate = float(np.sum(np.asarray(alpha) / np.asarray(spacing)))
    return math.inf if rate == 0.0 else cfl / rate


@dataclass
class _Schedule:
    dt: float
    n_steps: int
    archive_every: int


def _time_schedule(problem: ReachAvoidProblem, alpha: np.ndarray) -> _Schedule:
    if problem.horizon <= 0:
        raise ValueError("horizon must be positive")
    dt_max = cfl_time_step(alpha, problem.grid.spacing, problem.cfl)
    if problem.dt is None:
        n_steps = max(1, math.ceil(problem.horizon / dt_max - 1e-9))
        dt = problem.horizon / n_steps
    else:
        dt = float(problem.dt)
        if dt <= 0:
            raise ValueError("dt must be positive")
        if dt > dt_max * (1.0 + 1e-12):
            raise CFLViolation(
                f"dt={dt:.6g} violates the CFL bound {dt_max:.6g} "
                f"(alpha={alpha}, spacing={problem.grid.spacing}, cfl={problem.cfl})"
            )
        n_steps = round(problem.horizon / dt)
        if n_steps < 1 or abs(n_steps * dt - problem.horizon) > 1e-9 * max(1.0, problem.horizon):
            raise ValueError(f"horizon {problem.horizon} is not a multiple of dt {dt}")
    archive_every = max(1, math.ceil(n_steps / max(1, problem.archive_samples)))
    return _Schedule(dt, n_steps, archive_every)


class _LaxFriedrichs:
    """Precomputed drift / input coupling on the grid for fast Hamiltonian sweeps."""

    def __init__(self, model: ControlAffineModel, grid: RectGrid, states: np.ndarray, d_bound):
        self.n = grid.ndim
        self.h = grid.spacing
        # local dissipation: per-node bound on |dH/dlambda_i|
        local = model.flow_magnitude_bounds(states, d_bound)
        self.alpha = [self._compact(local[..., i]) for i in range(self.n)]
        self.u_lo = model.u_lo
        self.u_hi = model.u_hi
        drift = model.drift(states)
        gmat = model.input_matrix(states)
        # keep only non-zero couplings; constant fields collapse to scalars
        self.drift = [self._compact(drift[..., i]) for i in range(self.n)]
        self.coupling = [
            [(i, self._compact(gmat[..., i, j])) for i in range(self.n) if np.any(gmat[..., i, j] != 0)]
            for j in range(model.n_control)
        ]

    @staticmethod
    def _compact(a: np.ndarray):
        if not np.any(a):
            return None
        flat = a.reshape(-1)
        if np.all(flat == flat[0]):
            return float(flat[0])
        return np.ascontiguousarray(a)

    def derivatives(self, v: np.ndarray):
        """One-sided differences with zero-slope ghost cells (keeps the scheme monotone)."""
        plus, minus = [], []
        for i in range(self.n):
            d = np.diff(v, axis=i) / self.h[i]
            pad_hi = [(0, 0)] * self.n
            pad_hi[i] = (0, 1)
            pad_lo = [(0, 0)] * self.n
            pad_lo[i] = (1, 0)
            plus.append(np.pad(d, pad_hi))
            minus.append(np.pad(d, pad_lo))
        return plus, minus

    def rate(self, v: np.ndarray, d_bound: np.ndarray) -> np.ndarray:
        """``dV/dtau = H(avg grad) + sum_i alpha_i(x) (p+_i - p-_i) / 2``."""
        plus, minus = self.derivatives(v)
        out = np.zeros_like(v)
        lam = []
        for i in range(self.n):
            li = 0.5 * (plus[i] + minus[i])
            lam.append(li)
            if self.drift[i] is not None:
                out += self.drift[i] * li
            if d_bound[i] != 0.0:
                out -= d_bound[i] * np.abs(li)
            if self.alpha[i] is not None:
                out += 0.5 * self.alpha[i] * (plus[i] - minus[i])
        for j, terms in enumerate(self.coupling):
            if not terms:
                continue
            a = np.zeros_like(v)
            for i, gij in terms:
                a += gij * lam[i]
            out += np.maximum(a * self.u_lo[j], a * self.u_hi[j])
        return out


def _solve(problem: ReachAvoidProblem, reach: bool) -> ValueTube:
    grid = problem.grid
    states = grid.states()
    g = np.asarray(problem.constraint_fn(states), dtype=float)
    if g.shape != grid.counts:
        raise ValueError("constraint_fn must return one value per grid node")
    if reach:
        if problem.target_fn is None:
            raise ValueError("reach-avoid solve requires target_fn")
        l = np.asarray(problem.target_fn(states), dtype=float)
        v = np.minimum(l, g)
    else:
        l = None
        v = g.copy()
    if not (np.all(np.isfinite(g)) and np.all(np.isfinite(v))):
        raise NumericalFailure("terminal condition contains non-finite values")

    diss = problem.disturbance.max_bound if problem.dissipation_bound is None else problem.dissipation_bound
    if np.any(np.asarray(diss) < np.asarray(problem.disturbance.max_bound)):
        raise ValueError("dissipation_bound must cover the disturbance box")
    alpha = dissipation_coefficients(problem.model, states, diss)
    sched = _time_schedule(problem, alpha)
    scheme = _LaxFriedrichs(problem.model, grid, states, diss)
    del states

    taus = [0.0]
    archive = [v.copy()]
    for k in range(sched.n_steps):
        tau = k * sched.dt
        bound = np.asarray(problem.disturbance.bound(tau), dtype=float)
        v = v + sched.dt * scheme.rate(v, bound)
        if reach:
            np.maximum(v, l, out=v)
        np.minimum(v, g, out=v)
        step = k + 1
        if step % sched.archive_every == 0 or step == sched.n_steps:
            if not np.all(np.isfinite(v)):
                bad = np.argwhere(~np.isfinite(v))[0]
                raise NumericalFailure(
                    f"non-finite value at step {step} (tau={step * sched.dt:.4g}), grid index {tuple(bad)}"
                )
            taus.append(step * sched.dt)
            archive.append(v.copy())

    meta = {
        "problem": "reach_avoid" if reach else "avoid",
        "horizon": float(problem.horizon),
        "dt": sched.dt,
        "n_steps": sched.n_steps,
        "archive_every": sched.archive_every,
        "cfl": problem.cfl,
        "dissipation": alpha.tolist(),
        **problem.disturbance.describe(),
    }
    logger.debug("solved %s tube: %d steps, dt=%.4g", meta["problem"], sched.n_steps, sched.dt)
    return ValueTube(grid, np.array(taus), np.stack(archive), meta)


def solve_reach_avoid(problem: ReachAvoidProblem) -> ValueTube:
    return _solve(problem, reach=True)


def solve_avoid(problem: ReachAvoidProblem) -> ValueTube:
    return _solve(problem, reach=False)


@dataclass(frozen=True)
class EnsembleSpec:
    """K members: scalar multipliers on ``ddot_max`` (kind="rate") or ``d_max`` (kind="bound")."""

    kind: str
    multipliers: Sequence[float]
    d_spec: DisturbanceSpec
    problem: str = "reach_avoid"
    tags: tuple = field(default=())

    def __post_init__(self):
        if self.kind not in ("rate", "bound"):
            raise ValueError(f"unknown ensemble kind {self.kind!r}")
        if self.problem not in ("reach_avoid", "avoid"):
            raise ValueError(f"unknown problem type {self.problem!r}")
        m = np.asarray(self.multipliers, dtype=float)
        if m.ndim != 1 or m.size < 1:
            raise ValueError("ensemble needs at least one member")
        if np.any(np.diff(m) <= 0):
            raise ValueError("ensemble multipliers must be strictly increasing")
        if m[0] < 0 or m[-1] > 1.0:
            raise ValueError("ensemble multipliers must lie in [0, 1]")
        object.__setattr__(self, "multipliers", tuple(float(x) for x in m))

    @classmethod
    def evenly_spaced(cls, kind: str, d_spec: DisturbanceSpec, k: int = 5, **kw) -> "EnsembleSpec":
        return cls(kind, tuple(np.arange(1, k + 1) / k), d_spec, **kw)

    def member_parameters(self) -> np.ndarray:
        """Per-member parameter vectors, shape ``(K, n)``."""
        base = self.d_spec.ddot_max if self.kind == "rate" else self.d_spec.d_max
        return np.outer(self.multipliers, base)

    def member_disturbances(self) -> list[FixedBound | RateSchedule]:
        out = []
        for p in self.member_parameters():
            if self.kind == "rate":
                out.append(RateSchedule(TimeVaryingDisturbanceSet(p, self.d_spec.d_max)))
            else:
                out.append(FixedBound(p))
        return out


def _solve_member(args):
    problem, kind = args
    return solve_avoid(problem) if kind == "avoid" else solve_reach_avoid(problem)


def solve_ensemble(spec: EnsembleSpec, base: ReachAvoidProblem, jobs: int = 1) -> list[ValueTube]:
    """One tube per member, ordered like ``spec.multipliers``."""
    from dataclasses import replace

    # shared dissipation and time step keep the members pointwise ordered
    problems = [replace(base, disturbance=d, dissipation_bound=spec.d_spec.d_max) for d in spec.member_disturbances()]
    work = [(p, spec.problem) for p in problems]
    if jobs > 1 and len(work) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            tubes = list(pool.map(_solve_member, work))
    else:
        tubes = [_solve_member(w) for w in work]
    out = []
    for m, tube in zip(spec.multipliers, tubes):
        meta = dict(tube.meta, ensemble_kind=spec.kind, multiplier=m)
        out.append(ValueTube(tube.grid, tube.taus, tube.values, meta))
    return out
