"""Cityscape environment, closed-loop rollouts and benchmark metrics."""
from __future__ import annotations

import csv
import enum
import io
import multiprocessing
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from functools import partial
from typing import Callable, Sequence

import numpy as np
import scipy.linalg

from .dynamics import GRAVITY, PlanarQuadModel
from .filter import FilterConfig, Mode, filter_step
from .wind import DisturbanceEstimator, WindField, sample_field_params, wind_at


@dataclass(frozen=True)
class Environment:
    domain_lo: tuple = (-5.0, -0.2)
    domain_hi: tuple = (5.0, 2.8)
    boundary_lo: tuple = (-4.0, 0.0)
    boundary_hi: tuple = (4.0, 2.5)
    v_max: float = 1.9
    buildings: tuple = (
        ((-3.1, 0.0), (-1.3, 1.5)),
        ((0.0, 0.0), (1.2, 1.0)),
        ((2.0, 0.0), (3.2, 2.0)),
    )
    target_lo: tuple = (-2.5, 1.7)
    target_hi: tuple = (1.5, 2.3)
    target_v_max: float = 1.0

    def __post_init__(self):
        for lo, hi in self.buildings:
            overlap = all(max(lo[i], self.target_lo[i]) < min(hi[i], self.target_hi[i]) for i in range(2))
            if overlap:
                raise ValueError("target overlaps a building")
        inside = all(
            self.boundary_lo[i] <= self.target_lo[i] and self.target_hi[i] <= self.boundary_hi[i] for i in range(2)
        )
        if not inside:
            raise ValueError("target must lie inside the boundary")

    def canyons(self) -> list[tuple[float, float, float]]:
        """Gaps between neighbouring buildings as ``(x_lo, x_hi, rim_height)``."""
        bs = sorted(self.buildings, key=lambda b: b[0][0])
        out = []
        for (lo1, hi1), (lo2, hi2) in zip(bs, bs[1:]):
            if lo2[0] > hi1[0]:
                out.append((hi1[0], lo2[0], min(hi1[1], hi2[1])))
        return out

    def to_dict(self) -> dict:
        return {
            "boundary_lo": list(self.boundary_lo),
            "boundary_hi": list(self.boundary_hi),
            "v_max": self.v_max,
            "buildings": [[list(lo), list(hi)] for lo, hi in self.buildings],
            "target_lo": list(self.target_lo),
            "target_hi": list(self.target_hi),
            "target_v_max": self.target_v_max,
        }


def box_sdf(p: np.ndarray, lo, hi) -> np.ndarray:
    """Signed distance to an axis-aligned box: negative inside, positive outside."""
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    centre = 0.5 * (lo + hi)
    half = 0.5 * (hi - lo)
    q = np.abs(p - centre) - half
    outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
    inside = np.minimum(np.max(q, axis=-1), 0.0)
    return outside + inside


def constraint_g(env: Environment, x) -> np.ndarray:
    """Safety margin: negative inside a building, outside the boundary, or too fast."""
    x = np.asarray(x, dtype=float)
    p = x[..., :2]
    g = -box_sdf(p, env.boundary_lo, env.boundary_hi)
    for lo, hi in env.buildings:
        g = np.minimum(g, box_sdf(p, lo, hi))
    v_margin = env.v_max - np.max(np.abs(x[..., 2:4]), axis=-1)
    return np.minimum(g, v_margin)


def target_l(env: Environment, x) -> np.ndarray:
    """Positive inside the flyover corridor with the restricted velocity box."""
    x = np.asarray(x, dtype=float)
    pos = -box_sdf(x[..., :2], env.target_lo, env.target_hi)
    vel = env.target_v_max - np.max(np.abs(x[..., 2:4]), axis=-1)
    return np.minimum(pos, vel)


@dataclass(frozen=True)
class LQRController:
    """``u = clip(u_hover - K (x - x_goal))`` on the double-integrator linearisation."""

    model: PlanarQuadModel
    Q: tuple = (1.0, 1.0, 0.5, 0.5)
    R: tuple = (10.0, 0.1)
    gain: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        A = np.zeros((4, 4))
        A[0, 2] = A[1, 3] = 1.0
        B = self.model.input_matrix(np.zeros(4))
        Q = np.diag(self.Q)
        R = np.diag(self.R)
        P = scipy.linalg.solve_continuous_are(A, B, Q, R)
        object.__setattr__(self, "gain", np.linalg.solve(R, B.T @ P))

    def __call__(self, x, goal) -> np.ndarray:
        err = np.asarray(x, dtype=float) - np.array([goal[0], goal[1], 0.0, 0.0])
        return self.model.clip_control(self.model.u_hover - self.gain @ err)


def lqr_nominal(x, goal, controller: LQRController) -> np.ndarray:
    return controller(x, goal)


@dataclass(frozen=True)
class GoalSchedule:
    goals: np.ndarray
    period: int = 100

    def goal_at(self, step: int) -> np.ndarray:
        return self.goals[min(step // self.period, len(self.goals) - 1)]


def sample_goals(rng: np.random.Generator, env: Environment, n_goals: int = 10, margin: float = 0.25,
                 above_alt: float = 2.0, clearance: float = 0.3) -> np.ndarray:
    """Repeating (above a canyon, canyon bottom, canyon top) pattern over random canyons."""
    canyons = env.canyons()
    goals = []
    while len(goals) < n_goals:
        lo, hi, rim = canyons[rng.integers(len(canyons))]
        x = rng.uniform(lo + margin, hi - margin)
        for z in (above_alt, clearance, rim - clearance):
            goals.append((x, z))
    goals = np.array(goals[:n_goals])
    pts = np.column_stack([goals, np.zeros((n_goals, 2))])
    if np.any(constraint_g(env, pts) <= 0):
        raise ValueError("sampled goal inside the failure set")
    return goals


class Outcome(str, enum.Enum):
    COMPLETED = "completed"
    CRASHED = "crashed"


@dataclass(frozen=True)
class SimSettings:
    dt: float = 0.025
    n_steps: int = 1000
    goal_period: int = 100
    sample_every: int = 10
    n_goals: int = 10
    estimator_horizon: int = 1


@dataclass
class TrajectoryRecord:
    seed: int
    mode: str
    wind: dict
    goals: np.ndarray
    states: np.ndarray
    u_nom: np.ndarray
    u_star: np.ndarray
    d_true: np.ndarray
    d_bar: np.ndarray
    rate_bar: np.ndarray
    t_return: np.ndarray
    value: np.ndarray
    member: np.ndarray
    qp_status: list
    goal_index: np.ndarray
    outcome: Outcome
    crash_step: int | None
    dt: float

    @property
    def length(self) -> int:
        return len(self.u_star)

    def min_goal_distances(self) -> np.ndarray:
        """Closest approach (position only) to each goal that became active."""
        pos = self.states[1:, :2]
        out = []
        for k in np.unique(self.goal_index):
            mask = self.goal_index == k
            out.append(np.min(np.linalg.norm(pos[mask] - self.goals[k], axis=1)))
        return np.asarray(out)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for k in range(self.length):
            goal = self.goals[self.goal_index[k]]
            row = [k, _fmt(k * self.dt)]
            row += [_fmt(v) for v in self.states[k]]
            row += [_fmt(v) for v in self.u_nom[k]]
            row += [_fmt(v) for v in self.u_star[k]]
            row += [_fmt(v) for v in self.d_true[k]]
            row += [_fmt(v) for v in self.d_bar[k]]
            row += [_fmt(v) for v in self.rate_bar[k]]
            row += [_fmt(self.t_return[k]), _fmt(self.value[k]), int(self.member[k]), self.qp_status[k]]
            row += [_fmt(goal[0]), _fmt(goal[1])]
            w.writerow(row)
        return buf.getvalue()


CSV_COLUMNS = (
    ["step", "t", "px", "pz", "vx", "vz", "u_nom1", "u_nom2", "u_star1", "u_star2"]
    + [f"d_true{i}" for i in range(1, 5)]
    + [f"d_bar{i}" for i in range(1, 5)]
    + [f"rate_bar{i}" for i in range(1, 5)]
    + ["t_return", "value", "member", "qp_status", "goal_x", "goal_z"]
)


def _fmt(v) -> str:
    return repr(float(v))


def rk4_step(model: PlanarQuadModel, wind: WindField | None, x: np.ndarray, u: np.ndarray, dt: float) -> np.ndarray:
    """One RK4 step with zero-order-hold control and the wind evaluated at each stage."""
    gu = model.input_matrix(x) @ u

    def f(s):
        d = wind_at(wind, s) if wind is not None else 0.0
        return model.drift(s) + gu + d

    k1 = f(x)
    k2 = f(x + 0.5 * dt * k1)
    k3 = f(x + 0.5 * dt * k2)
    k4 = f(x + dt * k3)
    return x + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)


def rollout(
    env: Environment,
    wind: WindField | None,
    config: FilterConfig | None,
    x0,
    goals: np.ndarray,
    controller: LQRController,
    settings: SimSettings = SimSettings(),
    seed: int = 0,
) -> TrajectoryRecord:
    """Closed-loop simulation; ``config=None`` runs the raw nominal controller."""
    model = controller.model
    n = settings.n_steps
    x = np.asarray(x0, dtype=float).copy()
    schedule = GoalSchedule(np.asarray(goals, dtype=float), settings.goal_period)
    if config is not None:
        d_spec, t_max = config.d_spec, config.t_max
    else:
        d_spec, t_max = None, 1.0
    est = None
    if d_spec is not None:
        est = DisturbanceEstimator(
            d_spec.d_max, d_spec.ddot_max, t_max, settings.dt * settings.sample_every, settings.estimator_horizon
        )
        est.prime()

    states = [x.copy()]
    u_nom_log, u_star_log, d_log, dbar_log, rate_log = [], [], [], [], []
    tret_log, value_log, member_log, status_log, goal_idx = [], [], [], [], []
    outcome, crash_step = Outcome.COMPLETED, None
    for k in range(n):
        d_true = wind_at(wind, x) if wind is not None else np.zeros(4)
        if est is not None and k % settings.sample_every == 0:
            est.measure(d_true, k * settings.dt)
        goal = schedule.goal_at(k)
        u_nom = controller(x, goal)
        if config is None:
            u, value, tret, member, status = u_nom, np.nan, np.nan, -1, "none"
            d_bar = rate_bar = np.full(4, np.nan)
        else:
            d_bar, rate_bar = est.current_estimate()
            if config.mode is Mode.NAIVE_ENSEMBLE:
                d_bar = est.peak_magnitude()
            out = filter_step(config, x, d_bar, rate_bar, u_nom)
            u, value, tret, member, status = out.u_star, out.value, out.t_return, out.member_index, out.qp_status.value
            if not model.in_bounds(u):
                raise RuntimeError(f"filter produced out-of-box control {u} at step {k}")
        x = rk4_step(model, wind, x, u, settings.dt)
        if not np.all(np.isfinite(x)):
            raise FloatingPointError(f"non-finite state at step {k}: {x}")
        states.append(x.copy())
        u_nom_log.append(u_nom)
        u_star_log.append(u)
        d_log.append(d_true)
        dbar_log.append(d_bar)
        rate_log.append(rate_bar)
        tret_log.append(tret)
        value_log.append(value)
        member_log.append(member)
        status_log.append(status)
        goal_idx.append(min(k // settings.goal_period, len(goals) - 1))
        if constraint_g(env, x) <= 0:
            outcome, crash_step = Outcome.CRASHED, k + 1
            break

    return TrajectoryRecord(
        seed=seed,
        mode=config.mode.value if config is not None else "nominal",
        wind=wind.to_dict() if wind is not None else {},
        goals=np.asarray(goals, dtype=float),
        states=np.array(states),
        u_nom=np.array(u_nom_log),
        u_star=np.array(u_star_log),
        d_true=np.array(d_log),
        d_bar=np.array(dbar_log),
        rate_bar=np.array(rate_log),
        t_return=np.array(tret_log),
        value=np.array(value_log),
        member=np.array(member_log),
        qp_status=status_log,
        goal_index=np.array(goal_idx),
        outcome=outcome,
        crash_step=crash_step,
        dt=settings.dt,
    )


@dataclass(frozen=True)
class BenchmarkMetrics:
    pct_violations: float
    mean_goal_distance: float
    mean_traj_length: float
    n_traj: int

    def to_dict(self) -> dict:
        return {
            "pct_violations": self.pct_violations,
            "mean_goal_distance": self.mean_goal_distance,
            "mean_traj_length": self.mean_traj_length,
            "n_traj": self.n_traj,
        }


def aggregate(records: Sequence[TrajectoryRecord]) -> BenchmarkMetrics:
    if not records:
        raise ValueError("no trajectories to aggregate")
    crashed = [r.outcome is Outcome.CRASHED for r in records]
    return BenchmarkMetrics(
        pct_violations=float(np.mean(crashed)),
        mean_goal_distance=float(np.mean([r.min_goal_distances().mean() for r in records])),
        mean_traj_length=float(np.mean([r.length for r in records])),
        n_traj=len(records),
    )


@dataclass(frozen=True)
class Scenario:
    """Per-trajectory randomisation shared by every mode (paired seeding)."""

    seed: int
    wind: WindField | None
    goals: np.ndarray
    x0: np.ndarray


def make_scenario(env: Environment, base_wind: WindField, seed: int, index: int,
                  settings: SimSettings = SimSettings(), r_range=(3.0, 7.0), max_alt_lo: float = 0.1) -> Scenario:
    rng = np.random.default_rng([seed, index])
    wind = sample_field_params(rng, base_wind, r_range=r_range, max_alt_lo=max_alt_lo)
    goals = sample_goals(rng, env, settings.n_goals)
    x_lo, x_hi = env.target_lo[0] + 0.3, env.target_hi[0] - 0.3
    x0 = np.array([rng.uniform(x_lo, x_hi), 0.5 * (env.target_lo[1] + env.target_hi[1]), 0.0, 0.0])
    return Scenario(seed=index, wind=wind, goals=goals, x0=x0)


_POOL_STATE: dict = {}


def _pool_rollout(job):
    name, i = job
    st = _POOL_STATE
    sc = st["scenarios"][i]
    return rollout(st["env"], sc.wind, st["configs"][name], sc.x0, sc.goals, st["controller"], st["settings"], seed=sc.seed)


def run_benchmark(
    env: Environment,
    configs: dict,
    controller: LQRController,
    base_wind: WindField | None,
    n_traj: int,
    seed: int = 0,
    settings: SimSettings = SimSettings(),
    r_range=(3.0, 7.0),
    on_record: Callable[[TrajectoryRecord], None] | None = None,
    jobs: int = 1,
    max_alt_lo: float = 0.1,
) -> dict:
    """Paired rollouts for every mode in ``configs`` (ordered dict mode -> FilterConfig).

    ``base_wind=None`` runs every scenario without wind (goals and starts are
    still drawn from the seed). With ``jobs > 1`` rollouts run in forked
    workers, which inherit the tubes instead of pickling them; results are
    gathered in trajectory order, so output does not depend on ``jobs``.
    """
    if n_traj < 1:
        raise ValueError("n_traj must be at least 1")
    wind_ref = base_wind if base_wind is not None else WindField()
    scenarios = [make_scenario(env, wind_ref, seed, i, settings, r_range, max_alt_lo) for i in range(n_traj)]
    if base_wind is None:
        scenarios = [replace(sc, wind=None) for sc in scenarios]
    results = {}
    for name, cfg in configs.items():
        if jobs > 1:
            _POOL_STATE.update(env=env, configs=configs, controller=controller, settings=settings, scenarios=scenarios)
            try:
                ctx = multiprocessing.get_context("fork")
                with ProcessPoolExecutor(max_workers=jobs, mp_context=ctx) as pool:
                    records = list(pool.map(_pool_rollout, [(name, i) for i in range(n_traj)]))
            finally:
                _POOL_STATE.clear()
        else:
            records = [
                rollout(env, sc.wind, cfg, sc.x0, sc.goals, controller, settings, seed=sc.seed) for sc in scenarios
            ]
        if on_record is not None:
            for rec in records:
                on_record(rec)
        results[name] = (aggregate(records), records)
    return results


def constraint_fn(env: Environment) -> Callable:
    return partial(constraint_g, env)


def target_fn(env: Environment) -> Callable:
    return partial(target_l, env)
