"""Value-function safety filters.

Three modes share one quadratic program:

* ``SPACE_TO_TIME`` queries a rate-parameterised tube at the time-to-go
  ``t_return`` implied by the current disturbance estimate,
* ``NAIVE_ENSEMBLE`` switches between fixed-bound tubes by measured magnitude,
* ``WORST_CASE`` always uses the single tube built for ``d_max``.
"""
from __future__ import annotations

import enum
import itertools
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .dynamics import ControlAffineModel, DisturbanceSpec, optimal_control
from .grid import ValueTube


class Mode(str, enum.Enum):
    SPACE_TO_TIME = "space2time"
    NAIVE_ENSEMBLE = "naive"
    WORST_CASE = "worst-case"


class QPStatus(str, enum.Enum):
    NOMINAL_FEASIBLE = "nominal"
    CORRECTED = "corrected"
    FALLBACK_OPTIMAL = "fallback"


@dataclass(frozen=True)
class FilterConfig:
    """Tubes sorted by member parameter, plus the shared filter settings.

    ``member_params`` has one row per tube: a rate vector for
    ``SPACE_TO_TIME`` members, a bound vector for ``NAIVE_ENSEMBLE`` members.
    """

    model: ControlAffineModel
    tubes: Sequence[ValueTube]
    member_params: np.ndarray
    mode: Mode
    d_spec: DisturbanceSpec
    t_max: float
    gamma: float = 1.0

    def __post_init__(self):
        if self.gamma <= 0:
            raise ValueError("gamma must be positive")
        if len(self.tubes) == 0:
            raise ValueError("filter needs at least one tube")
        params = np.atleast_2d(np.asarray(self.member_params, dtype=float))
        if params.shape[0] == 1 and len(self.tubes) > 1:
            params = params.T
        if params.shape[0] != len(self.tubes):
            raise ValueError("one member parameter row per tube required")
        if np.any(np.diff(params.max(axis=1)) <= 0):
            raise ValueError("tubes must be sorted by strictly increasing member parameter")
        object.__setattr__(self, "member_params", params)
        object.__setattr__(self, "mode", Mode(self.mode))
        object.__setattr__(self, "tubes", tuple(self.tubes))


@dataclass(frozen=True)
class FilterOutput:
    u_star: np.ndarray
    value: float
    t_return: float
    member_index: int
    intervened: bool
    qp_status: QPStatus
    eta_bound: np.ndarray | None = None
    multiplier: float = 0.0


def t_return(d_bar, rate_bar, d_spec: DisturbanceSpec, t_max: float | None = None) -> float:
    """Smallest per-dimension ``(d_max - d_bar) / rate_bar``, clamped to ``[0, t_max]``."""
    d_bar = np.asarray(d_bar, dtype=float)
    rate_bar = np.asarray(rate_bar, dtype=float)
    if np.any(rate_bar <= 0):
        raise ValueError("rate estimate must be strictly positive (apply the floor rate)")
    t = float(np.min((d_spec.d_max - d_bar) / rate_bar))
    t = max(t, 0.0)
    return t if t_max is None else min(t, float(t_max))


def select_member(member_params, query) -> int:
    """Index of the smallest member whose parameter covers ``query``; last if none does.

    Scalar members are compared against the largest query component; vector
    members must dominate the query componentwise.
    """
    params = np.asarray(member_params, dtype=float)
    query = np.asarray(query, dtype=float)
    if params.ndim == 1:
        ok = params >= np.max(query)
    else:
        ok = np.all(params >= query, axis=1)
    hits = np.flatnonzero(ok)
    return int(hits[0]) if hits.size else len(params) - 1


def _alpha(gamma: float, v: float) -> float:
    return gamma * v


def constraint_coefficients(model, value, dvdt, grad, x, eta_bound, gamma):
    """``(a, b)`` for the filter constraint ``a . u >= b``.

    The inner minimum over the zero-centred disturbance box is resolved in
    closed form, which subtracts ``sum |grad_i| * eta_bound_i`` from the
    left-hand side.
    """
    grad = np.asarray(grad, dtype=float)
    a = model.input_matrix(x).T @ grad
    b = -_alpha(gamma, value) - dvdt - grad @ model.drift(x) + np.abs(grad) @ np.asarray(eta_bound, dtype=float)
    return a, float(b)


def box_halfspace_qp(u_nom, lo, hi, a, b, tol: float = 1e-12):
    """Minimise ``||u - u_nom||^2`` over ``lo <= u <= hi`` with ``a . u >= b``.

    Exact active-set enumeration: every coordinate is free, at its lower
    bound, or at its upper bound, with the halfspace either inactive or
    active. Returns ``(u, multiplier, feasible)``; when no box point meets the
    halfspace, ``feasible`` is False and ``u`` is None.
    """
    u_nom = np.asarray(u_nom, dtype=float)
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    a = np.asarray(a, dtype=float)
    scale = max(1.0, abs(b), float(np.abs(a) @ np.maximum(np.abs(lo), np.abs(hi))))
    slack_tol = tol * scale

    best, best_mu, best_obj = None, 0.0, np.inf
    proj = np.clip(u_nom, lo, hi)
    if a @ proj >= b - slack_tol:
        best, best_obj = proj, float(np.sum((proj - u_nom) ** 2))

    p = u_nom.size
    for pattern in itertools.product((0, 1, 2), repeat=p):
        pattern = np.asarray(pattern)
        free = pattern == 0
        u = np.where(pattern == 1, lo, np.where(pattern == 2, hi, u_nom))
        af = a[free]
        norm2 = float(af @ af)
        if norm2 == 0.0:
            continue
        residual = b - a @ u
        mu = residual / norm2
        if mu < 0:
            continue
        u = u.copy()
        u[free] = u_nom[free] + mu * af
        if np.any(u < lo - slack_tol) or np.any(u > hi + slack_tol):
            continue
        u = np.clip(u, lo, hi)
        if a @ u < b - slack_tol:
            continue
        obj = float(np.sum((u - u_nom) ** 2))
        if obj < best_obj - 1e-15:
            best, best_mu, best_obj = u, mu, obj
    if best is None:
        return None, 0.0, False
    return best, float(2.0 * best_mu), True


def cbf_qp(u_nom, value, dvdt, grad, x, eta_bound, config: FilterConfig, t_ret: float = 0.0, member: int = 0):
    """Minimal-deviation control satisfying the value-function barrier constraint."""
    model = config.model
    u_nom = np.asarray(u_nom, dtype=float)
    a, b = constraint_coefficients(model, value, dvdt, grad, x, eta_bound, config.gamma)
    u_nom_box = np.clip(u_nom, model.u_lo, model.u_hi)
    u, mult, feasible = box_halfspace_qp(u_nom_box, model.u_lo, model.u_hi, a, b)
    if not feasible:
        u = optimal_control(model, np.asarray(grad, dtype=float), np.asarray(x, dtype=float))
        status = QPStatus.FALLBACK_OPTIMAL
    elif np.array_equal(u, u_nom_box) and a @ u_nom_box >= b:
        status = QPStatus.NOMINAL_FEASIBLE
    else:
        status = QPStatus.CORRECTED
    width = model.u_hi - model.u_lo
    intervened = bool(np.any(np.abs(u - u_nom) > 1e-6 * np.maximum(width, 1e-12)))
    return FilterOutput(
        u_star=np.asarray(u, dtype=float),
        value=float(value),
        t_return=float(t_ret),
        member_index=int(member),
        intervened=intervened,
        qp_status=status,
        eta_bound=np.asarray(eta_bound, dtype=float),
        multiplier=mult,
    )


def query_plan(config: FilterConfig, d_bar, rate_bar) -> tuple[int, float, np.ndarray]:
    """``(member index, query time-to-go, disturbance half-width)`` for the current mode."""
    d_spec = config.d_spec
    if config.mode is Mode.SPACE_TO_TIME:
        k = select_member(config.member_params, rate_bar)
        # query where the member's present-time box still covers d_bar
        rate = np.maximum(config.member_params[k], np.asarray(rate_bar, dtype=float))
        tau = t_return(d_bar, rate, d_spec, config.t_max)
        eta = np.maximum(0.0, d_spec.d_max - tau * rate)
    elif config.mode is Mode.NAIVE_ENSEMBLE:
        k = select_member(config.member_params, d_bar)
        tau = config.tubes[k].horizon
        eta = config.member_params[k]
    else:
        k = len(config.tubes) - 1
        tau = config.tubes[k].horizon
        eta = d_spec.d_max
    tau = min(tau, config.tubes[k].horizon)
    return k, float(tau), np.asarray(eta, dtype=float)


def filter_step(config: FilterConfig, x, d_bar, rate_bar, u_nom) -> FilterOutput:
    """Query the selected tube and filter ``u_nom`` through the barrier QP."""
    k, tau, eta = query_plan(config, d_bar, rate_bar)
    q = config.tubes[k].query(x, tau)
    return cbf_qp(u_nom, q.value, q.dvdt, q.grad, x, eta, config, t_ret=tau, member=k)
