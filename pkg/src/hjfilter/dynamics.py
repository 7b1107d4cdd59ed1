"""Control- and disturbance-affine models and their closed-form Hamiltonians.

All models have the form ``xdot = f(x) + G(x) u + d`` with a box-bounded
control ``u`` and an additive, zero-centred box disturbance ``|d_i| <= b_i``.
Every function here broadcasts over leading batch axes so the same code
serves single-point queries and whole-grid dynamic programming sweeps.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

GRAVITY = 9.81


def _check_finite(*arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise ValueError("NaN or inf in dynamics input")


@dataclass(frozen=True)
class ControlAffineModel:
    """Base class; subclasses provide :meth:`drift` and :meth:`input_matrix`."""

    u_lo: np.ndarray
    u_hi: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.u_lo, dtype=float)
        hi = np.asarray(self.u_hi, dtype=float)
        if lo.shape != hi.shape or np.any(lo > hi):
            raise ValueError("control bounds must satisfy u_lo <= u_hi")
        object.__setattr__(self, "u_lo", lo)
        object.__setattr__(self, "u_hi", hi)

    n_state: int = field(init=False, default=0)

    @property
    def n_control(self) -> int:
        return self.u_lo.size

    @property
    def u_mid(self) -> np.ndarray:
        return 0.5 * (self.u_lo + self.u_hi)

    def drift(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def input_matrix(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def in_bounds(self, u, atol: float = 1e-12) -> bool:
        u = np.asarray(u, dtype=float)
        return bool(np.all(u >= self.u_lo - atol) and np.all(u <= self.u_hi + atol))

    def clip_control(self, u) -> np.ndarray:
        return np.clip(u, self.u_lo, self.u_hi)

    def max_flow_norm(self, states: np.ndarray, d_bound) -> float:
        """Upper bound of ``||f(x) + G(x)u + d||_2`` over ``states`` and the boxes."""
        a = self.flow_magnitude_bounds(states, d_bound)
        return float(np.sqrt(np.max(np.sum(a**2, axis=-1))))

    def flow_magnitude_bounds(self, states: np.ndarray, d_bound) -> np.ndarray:
        """Per-point, per-dimension ``max |xdot_i|`` over the control and disturbance boxes."""
        f = self.drift(states)
        gm = self.input_matrix(states)
        half = 0.5 * (self.u_hi - self.u_lo)
        centre = f + gm @ self.u_mid
        return np.abs(centre) + np.abs(gm) @ half + np.asarray(d_bound, dtype=float)


@dataclass(frozen=True)
class PlanarQuadModel(ControlAffineModel):
    """Planar quadrotor, state ``(p_x, p_z, v_x, v_z)``, control ``(u1, u2)``.

    ``u1`` scales gravity into horizontal acceleration, ``u2`` is the
    vertical specific thrust, so hover is ``u = (0, g)``.
    """

    u_lo: np.ndarray = field(default_factory=lambda: np.array([-0.25, GRAVITY - 4.0]))
    u_hi: np.ndarray = field(default_factory=lambda: np.array([0.25, GRAVITY + 4.0]))
    g: float = GRAVITY
    n_state: int = field(init=False, default=4)

    def drift(self, x):
        x = np.asarray(x, dtype=float)
        out = np.zeros_like(x)
        out[..., 0] = x[..., 2]
        out[..., 1] = x[..., 3]
        out[..., 3] = -self.g
        return out

    def input_matrix(self, x):
        x = np.asarray(x, dtype=float)
        gm = np.zeros(x.shape[:-1] + (4, 2))
        gm[..., 2, 0] = self.g
        gm[..., 3, 1] = 1.0
        return gm

    @property
    def u_hover(self) -> np.ndarray:
        return np.array([0.0, self.g])


@dataclass(frozen=True)
class DoubleIntegrator(ControlAffineModel):
    """``x1' = x2, x2' = u``; the toy system used by the oracle tests."""

    u_lo: np.ndarray = field(default_factory=lambda: np.array([-1.0]))
    u_hi: np.ndarray = field(default_factory=lambda: np.array([1.0]))
    n_state: int = field(init=False, default=2)

    def drift(self, x):
        x = np.asarray(x, dtype=float)
        out = np.zeros_like(x)
        out[..., 0] = x[..., 1]
        return out

    def input_matrix(self, x):
        x = np.asarray(x, dtype=float)
        gm = np.zeros(x.shape[:-1] + (2, 1))
        gm[..., 1, 0] = 1.0
        return gm


@dataclass(frozen=True)
class Integrator(ControlAffineModel):
    """Pure integrator ``x' = u`` with one input per state dimension."""

    u_lo: np.ndarray = field(default_factory=lambda: np.array([-1.0]))
    u_hi: np.ndarray = field(default_factory=lambda: np.array([1.0]))

    def __post_init__(self):
        super().__post_init__()
        object.__setattr__(self, "n_state", self.u_lo.size)

    def drift(self, x):
        return np.zeros_like(np.asarray(x, dtype=float))

    def input_matrix(self, x):
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(np.eye(self.n_state), x.shape[:-1] + (self.n_state,) * 2)


@dataclass(frozen=True)
class LinearModel(ControlAffineModel):
    """``xdot = A x + c + B u`` with constant matrices."""

    A: np.ndarray = None
    B: np.ndarray = None
    c: np.ndarray = None

    def __post_init__(self):
        super().__post_init__()
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        B = np.asarray(self.B, dtype=float).reshape(A.shape[0], self.u_lo.size)
        c = np.zeros(A.shape[0]) if self.c is None else np.asarray(self.c, dtype=float)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "c", c)
        object.__setattr__(self, "n_state", A.shape[0])

    def drift(self, x):
        x = np.asarray(x, dtype=float)
        return x @ self.A.T + self.c

    def input_matrix(self, x):
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(self.B, x.shape[:-1] + self.B.shape)


@dataclass(frozen=True)
class DisturbanceSpec:
    """Magnitude bound ``d_max`` and rate bound ``ddot_max`` per state dimension."""

    d_max: np.ndarray
    ddot_max: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.d_max, dtype=float)
        r = np.asarray(self.ddot_max, dtype=float)
        if d.shape != r.shape:
            raise ValueError("d_max and ddot_max must have the same shape")
        if np.any(d < 0) or np.any(r < 0):
            raise ValueError("disturbance bounds must be non-negative")
        object.__setattr__(self, "d_max", d)
        object.__setattr__(self, "ddot_max", r)

    @classmethod
    def from_lipschitz(cls, d_max, lipschitz, flow_bound) -> "DisturbanceSpec":
        """Rate bound from a field Lipschitz constant and a dynamics bound."""
        d_max = np.asarray(d_max, dtype=float)
        return cls(d_max, np.asarray(lipschitz, dtype=float) * flow_bound * np.ones_like(d_max))


@dataclass(frozen=True)
class TimeVaryingDisturbanceSet:
    """Box whose half-width is ``max(0, d_max - tau * ddot)`` at time-to-go ``tau``."""

    ddot: np.ndarray
    d_max: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "ddot", np.asarray(self.ddot, dtype=float))
        object.__setattr__(self, "d_max", np.asarray(self.d_max, dtype=float))

    def bound(self, tau: float) -> np.ndarray:
        return np.maximum(0.0, self.d_max - abs(tau) * self.ddot)


@dataclass(frozen=True)
class AugmentedModel:
    """State ``z = [x, ddot]``; the appended rate coordinates are constant."""

    base: ControlAffineModel
    ddot: np.ndarray

    def flow(self, z, u, eta) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        n = self.base.n_state
        out = np.zeros_like(z)
        out[..., :n] = flow(self.base, z[..., :n], u, eta)
        return out

    def augment(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return np.concatenate([x, np.broadcast_to(self.ddot, x.shape[:-1] + self.ddot.shape)], axis=-1)


def flow(model: ControlAffineModel, x, u, d, check_bounds: bool = True) -> np.ndarray:
    """State derivative ``f(x) + G(x) u + d``."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    d = np.asarray(d, dtype=float)
    _check_finite(x, u, d)
    if check_bounds and not model.in_bounds(u):
        raise ValueError(f"control {u} outside bounds [{model.u_lo}, {model.u_hi}]")
    return model.drift(x) + np.einsum("...ij,...j->...i", model.input_matrix(x), u) + d


def hamiltonian_terms(lam, drift, gmat, u_lo, u_hi, d_bound) -> np.ndarray:
    """``max_u min_d lam . (drift + gmat u + d)`` for box ``u`` and zero-centred box ``d``.

    Broadcasting: ``lam`` and ``drift`` are ``(..., n)``, ``gmat`` is ``(..., n, m)``.
    """
    a = np.einsum("...ij,...i->...j", gmat, lam)
    control = np.maximum(a * u_lo, a * u_hi).sum(axis=-1)
    return (lam * drift).sum(axis=-1) + control - (np.abs(lam) * d_bound).sum(axis=-1)


def hamiltonian(model: ControlAffineModel, lam, x, d_bound) -> np.ndarray | float:
    """Closed-form Hamiltonian ``max_u min_d lam^T (f(x) + G(x) u + d)``."""
    lam = np.asarray(lam, dtype=float)
    x = np.asarray(x, dtype=float)
    d_bound = np.asarray(d_bound, dtype=float)
    _check_finite(lam, x, d_bound)
    if np.any(d_bound < 0):
        raise ValueError("disturbance bound must be non-negative")
    h = hamiltonian_terms(lam, model.drift(x), model.input_matrix(x), model.u_lo, model.u_hi, d_bound)
    return float(h) if np.ndim(h) == 0 else h


def optimal_control(model: ControlAffineModel, lam, x) -> np.ndarray:
    """Bang-bang maximiser of ``lam^T G(x) u``; ties resolve to the box midpoint."""
    lam = np.asarray(lam, dtype=float)
    _check_finite(lam)
    a = np.einsum("...ij,...i->...j", model.input_matrix(x), lam)
    return np.where(a > 0, model.u_hi, np.where(a < 0, model.u_lo, model.u_mid))


def worst_case_disturbance(lam, d_bound) -> np.ndarray:
    """Minimiser of ``lam^T d`` over ``|d_i| <= d_bound_i``."""
    lam = np.asarray(lam, dtype=float)
    d_bound = np.asarray(d_bound, dtype=float)
    if np.any(d_bound < 0):
        raise ValueError("disturbance bound must be non-negative")
    return -np.sign(lam) * d_bound
