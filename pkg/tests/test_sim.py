import numpy as np
import pytest

from hjfilter.dynamics import GRAVITY, PlanarQuadModel
from hjfilter.sim import (
    CSV_COLUMNS,
    Environment,
    LQRController,
    Outcome,
    SimSettings,
    aggregate,
    box_sdf,
    constraint_g,
    make_scenario,
    rollout,
    run_benchmark,
    sample_goals,
    target_l,
)
from hjfilter.wind import WindField

env = Environment()
quad = PlanarQuadModel()
lqr = LQRController(quad)


def test_constraint_examples():
    assert constraint_g(env, [0.0, 1.25, 0, 0]) > 0
    assert constraint_g(env, [0.6, 0.5, 0, 0]) < 0
    assert constraint_g(env, [-0.5, 2.0, 2.0, 0]) < 0
    assert constraint_g(env, [4.5, 1.0, 0, 0]) < 0


def test_constraint_sign_matches_point_in_rectangle():
    px, pz = np.meshgrid(np.linspace(-5, 5, 200), np.linspace(-0.2, 2.8, 200), indexing="ij")
    pts = np.stack([px, pz, np.zeros_like(px), np.zeros_like(px)], axis=-1)
    g = constraint_g(env, pts)
    inside_boundary = (px > -4) & (px < 4) & (pz > 0) & (pz < 2.5)
    in_building = np.zeros_like(px, dtype=bool)
    for lo, hi in env.buildings:
        in_building |= (px >= lo[0]) & (px <= hi[0]) & (pz >= lo[1]) & (pz <= hi[1])
    safe = inside_boundary & ~in_building
    np.testing.assert_array_equal(g > 0, safe)


def test_target_examples():
    assert target_l(env, [-0.5, 2.0, 0, 0]) > 0
    assert target_l(env, [-0.5, 2.0, 1.5, 0]) < 0
    assert target_l(env, [1.5, 2.0, 0, 0]) == pytest.approx(0.0, abs=1e-12)
    assert target_l(env, [0.0, 1.7, 0, 0]) == pytest.approx(0.0, abs=1e-12)


def test_box_sdf_inside_and_outside():
    assert box_sdf(np.array([0.0, 0.0]), [-1, -1], [1, 1]) == -1.0
    assert box_sdf(np.array([4.0, 5.0]), [-1, -1], [1, 1]) == pytest.approx(5.0)


def test_environment_rejects_bad_target():
    with pytest.raises(ValueError):
        Environment(target_lo=(0.1, 0.5), target_hi=(1.0, 0.9))
    with pytest.raises(ValueError):
        Environment(target_hi=(1.5, 3.0))


def test_canyons():
    assert env.canyons() == [(-1.3, 0.0, 1.0), (1.2, 2.0, 1.0)]


def test_lqr_hover_and_sign():
    np.testing.assert_allclose(lqr([1.0, 1.0, 0, 0], (1.0, 1.0)), [0.0, GRAVITY])
    u = lqr([1.0, 1.0, 0, 0], (1.0, 1.5))
    assert u[1] > GRAVITY and abs(u[0]) < 1e-12


def test_lqr_converges_without_wind():
    rng = np.random.default_rng(0)
    for _ in range(50):
        goal = rng.uniform([-3, 0.5], [3, 2.2])
        x = np.array([*rng.uniform(goal - 0.5, goal + 0.5), 0.0, 0.0])
        from hjfilter.sim import rk4_step

        for _ in range(100):
            x = rk4_step(quad, None, x, lqr(x, goal), 0.025)
        assert np.linalg.norm(x[:2] - goal) < 0.05


def test_goals_follow_pattern():
    rng = np.random.default_rng(3)
    goals = sample_goals(rng, env)
    assert goals.shape == (10, 2)
    np.testing.assert_allclose(goals[0::3, 1], 2.0)
    np.testing.assert_allclose(goals[1::3, 1], 0.3)
    np.testing.assert_allclose(goals[2::3, 1], 0.7)
    pts = np.column_stack([goals, np.zeros((10, 2))])
    assert np.all(constraint_g(env, pts) > 0)


def test_scenarios_are_paired_and_replayable():
    a = make_scenario(env, WindField(), 0, 3)
    b = make_scenario(env, WindField(), 0, 3)
    assert a.wind == b.wind
    np.testing.assert_array_equal(a.goals, b.goals)
    assert make_scenario(env, WindField(), 0, 4).wind != a.wind


def short_settings(n=300):
    return SimSettings(n_steps=n)


def test_rollout_is_bit_identical():
    sc = make_scenario(env, WindField(), 0, 0)
    a = rollout(env, sc.wind, None, sc.x0, sc.goals, lqr, short_settings())
    b = rollout(env, sc.wind, None, sc.x0, sc.goals, lqr, short_settings())
    np.testing.assert_array_equal(a.states, b.states)
    assert a.to_csv() == b.to_csv()
    assert a.to_csv().splitlines()[0].split(",") == CSV_COLUMNS


def test_crash_consistency():
    sc = make_scenario(env, WindField(), 0, 1)
    rec = rollout(env, sc.wind, None, sc.x0, sc.goals, lqr)
    g = constraint_g(env, rec.states)
    if rec.outcome is Outcome.CRASHED:
        assert g[rec.crash_step] <= 0 and np.all(g[: rec.crash_step] > 0)
        assert rec.length == rec.crash_step
    else:
        assert np.all(g > 0) and rec.length == 1000


def test_raw_lqr_crashes_in_strong_wind():
    # the nominal controller ignores obstacles and wind, so the task is nontrivial
    res = run_benchmark(env, {"raw": None}, lqr, WindField(), n_traj=10)
    metrics, _ = res["raw"]
    assert metrics.pct_violations > 0.5


def corridor_goals():
    return np.array([[-2.0 + 0.35 * i, 2.0] for i in range(10)])


def test_raw_lqr_without_wind_stays_in_corridor():
    rec = rollout(env, None, None, [-2.0, 2.0, 0, 0], corridor_goals(), lqr)
    assert rec.outcome is Outcome.COMPLETED and rec.length == 1000
    assert rec.min_goal_distances().max() < 0.05


def test_aggregate_and_n_traj_validation():
    with pytest.raises(ValueError):
        run_benchmark(env, {"raw": None}, lqr, WindField(), n_traj=0)
    with pytest.raises(ValueError):
        aggregate([])
    rec = rollout(env, None, None, [-2.0, 2.0, 0, 0], corridor_goals(), lqr)
    m = aggregate([rec])
    assert m.pct_violations == 0.0 and m.mean_traj_length == 1000
    assert m.mean_goal_distance == pytest.approx(rec.min_goal_distances().mean())


# the remaining checks need the desk tubes (session fixture, solved once and cached)


def test_worst_case_filter_without_wind_never_crashes(desk):
    from hjfilter.cli import filter_configs

    cfg, out = desk
    worst = filter_configs(cfg, out, ["worst-case"])["worst-case"]
    results = run_benchmark(cfg.environment(), {"worst-case": worst}, lqr, None, 5, seed=3)
    metrics, records = results["worst-case"]
    assert metrics.pct_violations == 0.0
    assert all(r.length == 1000 for r in records)
    assert all(target_l(env, r.states[0]) > 0 for r in records)


def test_target_is_certified_by_worst_case_tube(desk, capsys):
    # the target should be control invariant; the solved tube is only a grid approximation, so this is logged
    from hjfilter.cli import load_members

    cfg, out = desk
    tubes, _ = load_members(out, "bound", cfg)
    worst = tubes[-1]
    rng = np.random.default_rng(5)
    lo = np.array([*env.target_lo, -env.target_v_max, -env.target_v_max])
    hi = np.array([*env.target_hi, env.target_v_max, env.target_v_max])
    pts = rng.uniform(lo, hi, size=(2000, 4))
    pts = pts[target_l(env, pts) > 0.05]
    v = worst.evaluate(pts, worst.horizon)
    frac = float(np.mean(v > 0))
    with capsys.disabled():
        print(f"\nworst-case tube certifies {100 * frac:.1f}% of {len(pts)} sampled target states")
    assert frac > 0.5
