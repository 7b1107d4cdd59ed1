"""Command-line entry points: ``solve``, ``bench`` and ``inspect``.

Every artifact carries the config hash and seed. Nothing time-dependent is
written to disk, so equal hashes give byte-identical outputs.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from pathlib import Path

import numpy as np

from .config import BenchmarkConfig, ConfigError
from .filter import FilterConfig, Mode
from .grid import RectGrid, load_tube, save_tube
from .hjr import CFLViolation, FixedBound, NumericalFailure, ReachAvoidProblem, solve_ensemble
from .sim import LQRController, constraint_fn, run_benchmark, target_fn

EXIT_OK, EXIT_ERROR, EXIT_CONFIG, EXIT_NUMERICAL = 0, 1, 2, 3
AXES = ("px", "pz", "vx", "vz")
MANIFEST = "manifest.json"


class MissingTubes(RuntimeError):
    pass


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _dump(data) -> str:
    return json.dumps(data, sort_keys=True, indent=2) + "\n"


def _log(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


def solver_grid(cfg: BenchmarkConfig) -> RectGrid:
    e = cfg.data["environment"]
    v = e["v_max"]
    return RectGrid([*e["domain_lo"], -v, -v], [*e["domain_hi"], v, v], tuple(cfg.data["solver"]["counts"]))


def base_problem(cfg: BenchmarkConfig) -> ReachAvoidProblem:
    s = cfg.data["solver"]
    env = cfg.environment()
    return ReachAvoidProblem(
        grid=solver_grid(cfg),
        model=cfg.model(),
        constraint_fn=constraint_fn(env),
        disturbance=FixedBound(cfg.d_spec().d_max),
        horizon=s["t_max"],
        target_fn=target_fn(env),
        dt=s["dt"] or None,
        cfl=s["cfl"],
    )


def tube_dir(out_dir) -> Path:
    return Path(out_dir) / "tubes"


def read_manifest(out_dir) -> dict:
    path = tube_dir(out_dir) / MANIFEST
    return json.loads(path.read_text())


def _manifest_current(cfg: BenchmarkConfig, out_dir) -> bool:
    try:
        manifest = read_manifest(out_dir)
    except (FileNotFoundError, json.JSONDecodeError):
        return False
    if manifest.get("solver_hash") != cfg.solver_hash():
        return False
    for m in manifest["members"]:
        path = tube_dir(out_dir) / m["file"]
        if not path.exists() or _sha256(path) != m["sha256"]:
            return False
    return True


def cmd_solve(cfg: BenchmarkConfig, out_dir, jobs: int = 1) -> dict:
    """Solve every requested ensemble and write tubes plus the manifest; no-op when already current."""
    out = tube_dir(out_dir)
    if _manifest_current(cfg, out_dir):
        _log(f"tubes in {out} are current for solver hash {cfg.solver_hash()[:12]}")
        return read_manifest(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    base = base_problem(cfg)
    members = []
    for spec in cfg.ensembles():
        t0 = time.perf_counter()
        tubes = solve_ensemble(spec, base, jobs=jobs)
        _log(f"solved {spec.kind} ensemble ({len(tubes)} members) in {time.perf_counter() - t0:.1f} s")
        for i, (mult, param, tube) in enumerate(zip(spec.multipliers, spec.member_parameters(), tubes)):
            name = f"{spec.kind}_{i}.tube"
            tube.meta.update(config_hash=cfg.hash, solver_hash=cfg.solver_hash(), seed=cfg.data["run"]["seed"])
            save_tube(tube, out / name)
            members.append(
                {
                    "kind": spec.kind,
                    "index": i,
                    "multiplier": mult,
                    "parameter": np.asarray(param).tolist(),
                    "file": name,
                    "sha256": _sha256(out / name),
                }
            )
    grid = base.grid
    manifest = {
        "config_hash": cfg.hash,
        "solver_hash": cfg.solver_hash(),
        "seed": cfg.data["run"]["seed"],
        "grid": {"lo": grid.lo.tolist(), "hi": grid.hi.tolist(), "counts": list(grid.counts)},
        "horizon": cfg.data["solver"]["t_max"],
        "solver": cfg.data["solver"],
        "dynamics": cfg.data["dynamics"],
        "members": members,
    }
    (out / MANIFEST).write_text(_dump(manifest))
    return manifest


def load_members(out_dir, kind: str, cfg: BenchmarkConfig | None = None):
    """``(tubes, parameter rows)`` of one ensemble, checked against the manifest."""
    try:
        manifest = read_manifest(out_dir)
    except FileNotFoundError:
        raise MissingTubes(f"no tube manifest in {tube_dir(out_dir)}; run `hjfilter solve` with this config first") from None
    if cfg is not None and manifest["solver_hash"] != cfg.solver_hash():
        raise MissingTubes(
            f"tubes in {tube_dir(out_dir)} were solved for a different config; rerun `hjfilter solve` with this config"
        )
    rows = sorted((m for m in manifest["members"] if m["kind"] == kind), key=lambda m: m["index"])
    if not rows:
        raise MissingTubes(f"no {kind!r} tubes in {tube_dir(out_dir)}; add it to solver.ensembles and run `hjfilter solve`")
    tubes = [load_tube(tube_dir(out_dir) / m["file"]) for m in rows]
    return tubes, np.array([m["parameter"] for m in rows])


def filter_configs(cfg: BenchmarkConfig, out_dir, modes) -> dict:
    model, d_spec = cfg.model(), cfg.d_spec()
    t_max, gamma = cfg.data["solver"]["t_max"], cfg.data["filter"]["gamma"]
    cache = {}

    def members(kind):
        if kind not in cache:
            cache[kind] = load_members(out_dir, kind, cfg)
        return cache[kind]

    out = {}
    for mode in modes:
        mode = Mode(mode)
        if mode is Mode.SPACE_TO_TIME:
            tubes, params = members("rate")
        elif mode is Mode.NAIVE_ENSEMBLE:
            tubes, params = members("bound")
        else:
            tubes, params = members("bound")
            tubes, params = tubes[-1:], params[-1:]
            if not np.allclose(params[0], d_spec.d_max):
                raise MissingTubes("the largest 'bound' member does not cover d_max, so there is no worst-case tube")
        out[mode.value] = FilterConfig(model, tubes, params, mode, d_spec, t_max, gamma)
    return out


def summary_table(metrics: dict) -> str:
    lines = [f"{'mode':<12} {'% violations':>13} {'goal dist':>10} {'traj len':>9}"]
    for mode, m in metrics.items():
        lines.append(
            f"{mode:<12} {100 * m['pct_violations']:>12.1f}% {m['mean_goal_distance']:>10.3f} {m['mean_traj_length']:>9.1f}"
        )
    return "\n".join(lines)


def cmd_bench(cfg: BenchmarkConfig, out_dir, jobs: int = 1) -> dict:
    """Run the paired benchmark; writes ``bench/metrics.json`` and one trace CSV per rollout."""
    run = cfg.data["run"]
    modes = list(run["modes"])
    configs = filter_configs(cfg, out_dir, modes)
    env = cfg.environment()
    controller = LQRController(cfg.model(), tuple(run["lqr_q"]), tuple(run["lqr_r"]))
    w = cfg.data["wind"]
    t0 = time.perf_counter()
    results = run_benchmark(
        env,
        configs,
        controller,
        cfg.wind(),
        run["n_traj"],
        seed=run["seed"],
        settings=cfg.sim_settings(),
        r_range=tuple(w["r_range"]),
        jobs=jobs,
        max_alt_lo=w["max_alt_lo"],
    )
    _log(f"benchmark finished in {time.perf_counter() - t0:.1f} s")

    bench = Path(out_dir) / "bench"
    header = f"# config_hash={cfg.hash} seed={run['seed']}"
    metrics = {}
    per_mode = []
    for mode, (m, records) in results.items():
        metrics[mode] = m.to_dict()
        per_mode.append(
            {
                "mode": mode,
                "metrics": m.to_dict(),
                "crash_steps": [r.crash_step for r in records],
                "wind": [r.wind for r in records],
            }
        )
        trace_dir = bench / "traces" / mode
        trace_dir.mkdir(parents=True, exist_ok=True)
        for i, rec in enumerate(records):
            (trace_dir / f"traj_{i:03d}.csv").write_text(f"{header} mode={mode} traj={i}\n" + rec.to_csv())
    summary = {
        "config_hash": cfg.hash,
        "seed": run["seed"],
        "n_traj": run["n_traj"],
        "trajectory_seeds": [[run["seed"], i] for i in range(run["n_traj"])],
        "modes": per_mode,
    }
    bench.mkdir(parents=True, exist_ok=True)
    (bench / "metrics.json").write_text(_dump(summary))
    print(summary_table(metrics))
    return summary


def parse_fixed(text: str | None) -> dict:
    out = {}
    for item in filter(None, (text or "").split(",")):
        key, sep, value = item.partition("=")
        if not sep or key.strip() not in AXES:
            raise ValueError(f"bad --at entry {item!r}; expected e.g. vx=0")
        out[key.strip()] = float(value)
    return out


def value_slice(tube, tau: float, axes=("px", "pz"), fixed=None):
    """2D slice of ``tube`` at time-to-go ``tau`` over the grid nodes of ``axes``."""
    fixed = dict(fixed or {})
    dims = [AXES.index(a) for a in axes]
    if len(set(dims)) != 2:
        raise ValueError("a slice needs two distinct axes")
    grid = tube.grid
    if not 0.0 <= tau <= tube.horizon:
        raise ValueError(f"tau={tau} outside the tube horizon [0, {tube.horizon}]")
    point = np.zeros(grid.ndim)
    for d, name in enumerate(AXES[: grid.ndim]):
        if d in dims:
            continue
        value = fixed.pop(name, 0.0)
        if not grid.lo[d] <= value <= grid.hi[d]:
            raise ValueError(f"{name}={value} outside the grid [{grid.lo[d]}, {grid.hi[d]}]")
        point[d] = value
    if fixed:
        raise ValueError(f"fixed values given for sliced axes: {sorted(fixed)}")
    ax = grid.axes()
    a, b = np.meshgrid(ax[dims[0]], ax[dims[1]], indexing="ij")
    pts = np.broadcast_to(point, a.shape + (grid.ndim,)).copy()
    pts[..., dims[0]] = a
    pts[..., dims[1]] = b
    values = tube.evaluate(pts, tau)
    return ax[dims[0]], ax[dims[1]], values


def slice_csv(rows, cols, values, axes, header: str) -> str:
    lines = [header, ",".join([f"{axes[0]}\\{axes[1]}"] + [repr(float(c)) for c in cols])]
    for r, row in zip(rows, values):
        lines.append(",".join([repr(float(r))] + [repr(float(v)) for v in row]))
    return "\n".join(lines) + "\n"


def cmd_inspect(tube_path, tau: float, axes=("px", "pz"), fixed=None) -> str:
    tube = load_tube(tube_path)
    rows, cols, values = value_slice(tube, tau, axes, fixed)
    meta = tube.meta
    header = f"# tube={Path(tube_path).name} tau={tau!r} config_hash={meta.get('config_hash', '')} seed={meta.get('seed', '')}"
    return slice_csv(rows, cols, values, axes, header)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hjfilter", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", required=True, help="benchmark TOML file")
        sp.add_argument("--out-dir", default="runs", help="output directory (default: runs)")
        sp.add_argument("--seed", type=int, help="override run.seed")
        sp.add_argument("--jobs", type=int, default=1, help="worker processes")

    s = sub.add_parser("solve", help="solve the value-function ensembles")
    common(s)
    b = sub.add_parser("bench", help="run the paired closed-loop benchmark")
    common(b)
    b.add_argument("--modes", help="comma-separated subset of space2time,naive,worst-case")
    b.add_argument("--n-traj", type=int, help="override run.n_traj")
    i = sub.add_parser("inspect", help="export a 2D value slice as CSV")
    i.add_argument("tube", help="tube file written by solve")
    i.add_argument("--tau", type=float, help="time-to-go (default: the tube horizon)")
    i.add_argument("--axes", default="px,pz", help="two sliced axes among px,pz,vx,vz")
    i.add_argument("--at", help="fixed values of the other axes, e.g. vx=0,vz=0 (default 0)")
    i.add_argument("--out", help="CSV path (default: stdout)")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "inspect":
            axes = tuple(a.strip() for a in args.axes.split(","))
            if len(axes) != 2 or any(a not in AXES for a in axes):
                raise ValueError(f"--axes must name two of {','.join(AXES)}")
            tau = args.tau if args.tau is not None else load_tube(args.tube).horizon
            text = cmd_inspect(args.tube, tau, axes, parse_fixed(args.at))
            if args.out:
                Path(args.out).write_text(text)
            else:
                sys.stdout.write(text)
            return EXIT_OK
        cfg = BenchmarkConfig.load(args.config)
        modes = args.modes.split(",") if getattr(args, "modes", None) else None
        cfg = cfg.with_overrides(seed=args.seed, n_traj=getattr(args, "n_traj", None), modes=modes)
        if args.command == "solve":
            cmd_solve(cfg, args.out_dir, jobs=args.jobs)
        else:
            cmd_bench(cfg, args.out_dir, jobs=args.jobs)
        return EXIT_OK
    except ConfigError as exc:
        _log(f"config error: {exc}")
        return EXIT_CONFIG
    except (CFLViolation, NumericalFailure, FloatingPointError) as exc:
        _log(f"numerical failure: {exc}")
        return EXIT_NUMERICAL
    except MissingTubes as exc:
        _log(f"error: {exc}")
        return EXIT_CONFIG
    except (ValueError, OSError) as exc:
        _log(f"error: {exc}")
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
