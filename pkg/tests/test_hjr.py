import itertools
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hjfilter.dynamics import DisturbanceSpec, Integrator, TimeVaryingDisturbanceSet, hamiltonian
from hjfilter.grid import RectGrid, interpolate
from hjfilter.hjr import (
    CFLViolation,
    EnsembleSpec,
    FixedBound,
    NumericalFailure,
    RateSchedule,
    ReachAvoidProblem,
    cfl_time_step,
    solve_avoid,
    solve_ensemble,
    solve_reach_avoid,
)
from oracles import game_tree_reach_avoid, refinement_errors, magnitude_nesting_pairs, smooth_linear_problem, toy_probes, toy_problem

SLACK = 1e-10
line = RectGrid([-1.0], [1.0], (21,))


def const(c):
    return lambda s: np.full(s.shape[:-1], float(c))


def small_problem(d=(0.05, 0.2), horizon=1.0):
    return replace(toy_problem((25, 41)), disturbance=FixedBound(np.asarray(d, dtype=float)), horizon=horizon)


def test_whole_space_target_is_fixed_point():
    p = ReachAvoidProblem(line, Integrator(), const(1), FixedBound([0.3]), 1.0, target_fn=const(1))
    tube = solve_reach_avoid(p)
    assert np.all(tube.values == 1.0)


def test_failure_states_never_certified():
    p = small_problem()
    g = p.constraint_fn(p.grid.states())
    bad = g < 0
    assert bad.any()
    # the value can only sink further below g, so failure is never certified safe
    for tube in (solve_avoid(p), solve_reach_avoid(p)):
        assert np.all(tube.values[:, bad] <= g[bad])


def test_static_avoid_constant():
    p = ReachAvoidProblem(line, Integrator(np.array([0.0]), np.array([0.0])), const(0.7), FixedBound([0.0]), 1.0, dt=0.1)
    tube = solve_avoid(p)
    assert np.all(tube.values == 0.7)
    assert tube.taus[-1] == pytest.approx(1.0)


def test_terminal_slice_and_clamp():
    p = small_problem()
    states = p.grid.states()
    g, l = p.constraint_fn(states), p.target_fn(states)
    ra = solve_reach_avoid(p)
    np.testing.assert_array_equal(ra.values[0], np.minimum(l, g))
    av = solve_avoid(p)
    np.testing.assert_array_equal(av.values[0], g)
    for tube in (ra, av):
        assert np.all(tube.values <= g + 0.0)


def test_cfl_violation_refused():
    p = small_problem()
    with pytest.raises(CFLViolation):
        solve_reach_avoid(replace(p, dt=0.5))


def test_non_finite_terminal_aborts():
    p = replace(small_problem(), constraint_fn=lambda s: np.where(s[..., 0] > 0.5, np.nan, 1.0))
    with pytest.raises(NumericalFailure):
        solve_avoid(p)


def test_requested_dt_must_divide_horizon():
    p = small_problem()
    with pytest.raises(ValueError):
        solve_avoid(replace(p, dt=0.0031))


def test_cfl_time_step_summed_form():
    assert cfl_time_step(np.array([2.0, 1.0]), np.array([0.1, 0.1]), 0.5) == pytest.approx(0.5 / 30)
    assert cfl_time_step(np.zeros(2), np.ones(2)) == np.inf


def test_meta_records_solver_settings():
    tube = solve_reach_avoid(small_problem())
    for key in ("problem", "horizon", "dt", "n_steps", "cfl", "dissipation", "parameterization"):
        assert key in tube.meta
    assert tube.meta["problem"] == "reach_avoid"
    assert tube.horizon == pytest.approx(1.0)
    every, n = tube.meta["archive_every"], tube.meta["n_steps"]
    assert len(tube.taus) == n // every + 1 + (n % every != 0)
    assert tube.taus[-1] == tube.horizon


def test_archive_targets_fifty_samples():
    tube = solve_reach_avoid(replace(small_problem(), horizon=4.0))
    assert tube.meta["n_steps"] > 100
    assert 45 <= len(tube.taus) <= 52


def test_toy_matches_game_tree():
    probes = toy_probes()
    oracle = game_tree_reach_avoid()
    won = oracle(probes)
    tube = solve_reach_avoid(toy_problem())
    v = np.array([interpolate(tube, p, tube.horizon) for p in probes])
    agree = (v > 0) == won
    assert agree.mean() >= 0.95
    # every disagreement sits next to the oracle's own boundary (one probe cell)
    offsets = np.array([[a, b] for a in (-1, 0, 1) for b in (-1, 0, 1)]) * 0.1
    for p in probes[~agree]:
        nb = oracle(p + offsets)
        assert nb.min() != nb.max(), p


def test_reach_avoid_tau_monotone():
    tube = solve_reach_avoid(small_problem())
    assert np.all(np.diff(tube.values, axis=0) >= -SLACK)


def test_avoid_tau_anti_monotone():
    tube = solve_avoid(small_problem())
    assert np.all(np.diff(tube.values, axis=0) <= SLACK)


def test_rate_schedule_tau_monotone():
    p = replace(small_problem(), disturbance=RateSchedule(TimeVaryingDisturbanceSet(np.array([0.1, 0.3]), np.array([0.05, 0.2]))))
    tube = solve_reach_avoid(p)
    assert np.all(np.diff(tube.values, axis=0) >= -SLACK)


@settings(max_examples=10, deadline=None)
@given(st.floats(0.0, 0.2), st.floats(0.0, 0.3), st.floats(0.0, 0.1), st.floats(0.0, 0.1))
def test_disturbance_box_monotone(d1, d2, e1, e2):
    base = small_problem((0.0, 0.0))
    diss = np.array([0.3, 0.4])
    small = solve_reach_avoid(replace(base, disturbance=FixedBound([d1, d2]), dissipation_bound=diss))
    big = solve_reach_avoid(replace(base, disturbance=FixedBound([d1 + e1, d2 + e2]), dissipation_bound=diss))
    assert np.all(big.values <= small.values + SLACK)


def test_dissipation_bound_must_cover_box():
    with pytest.raises(ValueError):
        solve_avoid(replace(small_problem(), dissipation_bound=np.zeros(2)))


def _spec():
    return DisturbanceSpec(np.array([0.05, 0.2]), np.array([0.1, 0.4]))


def test_zero_rate_equals_fixed_bound():
    base = small_problem()
    spec = _spec()
    (zero,) = solve_ensemble(EnsembleSpec("rate", (0.0,), spec), base)
    fixed = solve_reach_avoid(replace(base, disturbance=FixedBound(spec.d_max), dissipation_bound=spec.d_max))
    assert np.max(np.abs(zero.values - fixed.values)) <= 1e-10
    np.testing.assert_array_equal(zero.taus, fixed.taus)


def test_naive_ensemble_nesting():
    tubes = solve_ensemble(EnsembleSpec("bound", (0.0, 0.5, 1.0), _spec()), small_problem())
    for lo, hi in zip(tubes, tubes[1:]):
        assert np.all(hi.values <= lo.values + SLACK)
    assert [t.meta["multiplier"] for t in tubes] == [0.0, 0.5, 1.0]


def test_rate_ensemble_fixed_tau_order():
    # at equal time-to-go a faster member has assumed a smaller present box
    tubes = solve_ensemble(EnsembleSpec.evenly_spaced("rate", _spec(), k=3), small_problem())
    for slow, fast in zip(tubes, tubes[1:]):
        assert np.all(slow.values <= fast.values + SLACK)
    assert all(t.meta["ensemble_kind"] == "rate" for t in tubes)


def test_rate_ensemble_nesting_at_fixed_magnitude():
    spec = EnsembleSpec.evenly_spaced("rate", _spec(), k=3)
    tubes = solve_ensemble(spec, small_problem(horizon=2.0))
    checked = 0
    for (ms, slow), (mf, fast) in itertools.combinations(zip(spec.multipliers, tubes), 2):
        for i, j in magnitude_nesting_pairs(slow, fast, ms, mf):
            assert np.all(fast.values[j] <= slow.values[i] + SLACK)
            checked += 1
    assert checked > 20


def test_parallel_ensemble_is_identical():
    spec = EnsembleSpec("bound", (0.5, 1.0), _spec())
    serial = solve_ensemble(spec, small_problem())
    parallel = solve_ensemble(spec, small_problem(), jobs=2)
    for a, b in zip(serial, parallel):
        np.testing.assert_array_equal(a.values, b.values)


@pytest.mark.parametrize(
    "kind,mult",
    [("wind", (0.5, 1.0)), ("rate", (0.5, 0.4)), ("rate", (1.0, 1.5)), ("bound", ())],
)
def test_ensemble_spec_validation(kind, mult):
    with pytest.raises(ValueError):
        EnsembleSpec(kind, mult, _spec())


def test_evenly_spaced_members():
    spec = EnsembleSpec.evenly_spaced("rate", _spec())
    assert spec.multipliers == (0.2, 0.4, 0.6, 0.8, 1.0)
    np.testing.assert_allclose(spec.member_parameters()[-1], _spec().ddot_max)


def test_refinement_error_and_residual_decrease():
    errs, residuals = refinement_errors()
    assert np.all(np.diff(errs) < 0), errs
    assert np.all(np.diff(residuals) < 0), residuals
    # first-order scheme: each halving should at least cut the error by a third
    assert np.all(errs[1:] / errs[:-1] < 0.67)
