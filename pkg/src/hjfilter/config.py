"""Benchmark configuration: TOML file, schema validation, canonical hash.

Every block is optional; missing keys take the defaults below. Unknown keys
are rejected so that a typo cannot silently fall back to a default.
"""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import jsonschema
import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .dynamics import DisturbanceSpec, PlanarQuadModel
from .filter import Mode
from .hjr import EnsembleSpec
from .sim import Environment, SimSettings
from .wind import WindField


class ConfigError(ValueError):
    pass


DEFAULTS = {
    "environment": {
        "domain_lo": [-5.0, -0.2],
        "domain_hi": [5.0, 2.8],
        "boundary_lo": [-4.0, 0.0],
        "boundary_hi": [4.0, 2.5],
        "v_max": 1.9,
        "buildings": [[[-3.1, 0.0], [-1.3, 1.5]], [[0.0, 0.0], [1.2, 1.0]], [[2.0, 0.0], [3.2, 2.0]]],
        "target_lo": [-2.5, 1.7],
        "target_hi": [1.5, 2.3],
        "target_v_max": 1.0,
    },
    "dynamics": {
        "u_lo": [-0.25, 5.81],
        "u_hi": [0.25, 13.81],
        "d_max": [0.75, 0.75, 0.75, 0.75],
        "ddot_max": [3.0, 3.0, 3.0, 3.0],
    },
    "wind": {
        "enabled": True,
        "D": 1.0,
        "W": 0.75,
        "r_range": [3.0, 7.0],
        "band_bottom": 0.0,
        "band_top": 1.0,
        "max_alt_lo": 0.1,
        "canyon_x_ranges": [[-1.3, 0.0], [1.2, 2.0]],
        "taper": 0.2,
        "direction": [1.0, -1.0, 1.0, -1.0],
    },
    "solver": {
        "counts": [41, 25, 15, 15],
        "t_max": 5.0,
        "dt": 0.0,
        "cfl": 0.5,
        "k": 5,
        "ensembles": ["rate", "bound"],
    },
    "filter": {
        "gamma": 4.0,
        "horizon": 1,
        "sample_every": 10,
    },
    "run": {
        "n_traj": 20,
        "n_steps": 1000,
        "dt": 0.025,
        "goal_period": 100,
        "n_goals": 10,
        "seed": 0,
        "modes": ["space2time", "naive", "worst-case"],
        "lqr_q": [1.0, 1.0, 0.5, 0.5],
        "lqr_r": [10.0, 0.1],
    },
}


def _num_list(n=None):
    s = {"type": "array", "items": {"type": "number"}}
    if n is not None:
        s.update(minItems=n, maxItems=n)
    return s


_pair = _num_list(2)
_vec4 = _num_list(4)
_pos = {"type": "number", "exclusiveMinimum": 0}


def _block(props: dict) -> dict:
    return {"type": "object", "properties": props, "additionalProperties": False}


SCHEMA = _block(
    {
        "environment": _block(
            {
                "domain_lo": _pair,
                "domain_hi": _pair,
                "boundary_lo": _pair,
                "boundary_hi": _pair,
                "v_max": _pos,
                "buildings": {"type": "array", "items": {"type": "array", "items": _pair, "minItems": 2, "maxItems": 2}},
                "target_lo": _pair,
                "target_hi": _pair,
                "target_v_max": _pos,
            }
        ),
        "dynamics": _block({"u_lo": _pair, "u_hi": _pair, "d_max": _vec4, "ddot_max": _vec4}),
        "wind": _block(
            {
                "enabled": {"type": "boolean"},
                "D": {"type": "number", "minimum": 0},
                "W": {"type": "number", "minimum": 0},
                "r_range": _pair,
                "band_bottom": {"type": "number"},
                "band_top": {"type": "number"},
                "max_alt_lo": {"type": "number", "minimum": 0},
                "canyon_x_ranges": {"type": "array", "items": _pair},
                "taper": _pos,
                "direction": _vec4,
            }
        ),
        "solver": _block(
            {
                "counts": {"type": "array", "items": {"type": "integer", "minimum": 2}, "minItems": 4, "maxItems": 4},
                "t_max": _pos,
                "dt": {"type": "number", "minimum": 0},
                "cfl": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                "k": {"type": "integer", "minimum": 1},
                "ensembles": {
                    "type": "array",
                    "items": {"enum": ["rate", "bound"]},
                    "minItems": 1,
                    "uniqueItems": True,
                },
            }
        ),
        "filter": _block(
            {
                "gamma": _pos,
                "horizon": {"type": "integer", "minimum": 1},
                "sample_every": {"type": "integer", "minimum": 1},
            }
        ),
        "run": _block(
            {
                "n_traj": {"type": "integer", "minimum": 1},
                "n_steps": {"type": "integer", "minimum": 1},
                "dt": _pos,
                "goal_period": {"type": "integer", "minimum": 1},
                "n_goals": {"type": "integer", "minimum": 1},
                "seed": {"type": "integer", "minimum": 0},
                "modes": {
                    "type": "array",
                    "items": {"enum": [m.value for m in Mode]},
                    "minItems": 1,
                    "uniqueItems": True,
                },
                "lqr_q": _vec4,
                "lqr_r": _pair,
            }
        ),
    }
)


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def canonical_json(data: dict) -> str:
    return json.dumps(data, sort_keys=True, separators=(",", ":"))


@dataclass(frozen=True)
class BenchmarkConfig:
    """Validated configuration; ``data`` is the fully merged dictionary."""

    data: dict

    @classmethod
    def from_dict(cls, raw: dict) -> "BenchmarkConfig":
        try:
            jsonschema.validate(raw, SCHEMA)
        except jsonschema.ValidationError as exc:
            where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
            raise ConfigError(f"{where}: {exc.message}") from None
        data = _merge(DEFAULTS, raw)
        # integers and floats hash differently in JSON, so normalise numbers through the schema's defaults
        data = json.loads(canonical_json(_floatify(data, DEFAULTS)))
        cfg = cls(data)
        try:
            cfg._check_cross_references()
        except ConfigError:
            raise
        except ValueError as exc:  # owning modules validate their own invariants
            raise ConfigError(str(exc)) from None
        return cfg

    @classmethod
    def load(cls, path) -> "BenchmarkConfig":
        path = Path(path)
        try:
            raw = tomllib.loads(path.read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file {path} not found") from None
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        return cls.from_dict(raw)

    @property
    def hash(self) -> str:
        return hashlib.sha256(canonical_json(self.data).encode()).hexdigest()

    def with_overrides(self, **run) -> "BenchmarkConfig":
        """Copy with ``run`` block keys replaced (CLI flags)."""
        run = {k: v for k, v in run.items() if v is not None}
        return BenchmarkConfig.from_dict(_merge(self.data, {"run": run}))

    def solver_hash(self) -> str:
        """Hash of the blocks that determine the tubes, so bench-only edits reuse solved tubes."""
        keys = ("environment", "dynamics", "solver")
        return hashlib.sha256(canonical_json({k: self.data[k] for k in keys}).encode()).hexdigest()

    def _check_cross_references(self):
        self.environment()
        self.model()
        self.d_spec()
        self.wind()
        s = self.data["solver"]
        if s["dt"] > 0 and abs(round(s["t_max"] / s["dt"]) * s["dt"] - s["t_max"]) > 1e-9:
            raise ConfigError("solver.dt must divide solver.t_max")
        r = self.data["run"]
        lo, hi = self.data["wind"]["r_range"]
        if not 0 < lo <= hi:
            raise ConfigError("wind.r_range must satisfy 0 < lo <= hi")
        needs = {"space2time": "rate", "naive": "bound", "worst-case": "bound"}
        for mode in r["modes"]:
            if needs[mode] not in s["ensembles"]:
                raise ConfigError(f"mode {mode} needs the {needs[mode]!r} ensemble in solver.ensembles")

    def environment(self) -> Environment:
        e = self.data["environment"]
        return Environment(
            domain_lo=tuple(e["domain_lo"]),
            domain_hi=tuple(e["domain_hi"]),
            boundary_lo=tuple(e["boundary_lo"]),
            boundary_hi=tuple(e["boundary_hi"]),
            v_max=e["v_max"],
            buildings=tuple((tuple(lo), tuple(hi)) for lo, hi in e["buildings"]),
            target_lo=tuple(e["target_lo"]),
            target_hi=tuple(e["target_hi"]),
            target_v_max=e["target_v_max"],
        )

    def model(self) -> PlanarQuadModel:
        d = self.data["dynamics"]
        return PlanarQuadModel(np.array(d["u_lo"]), np.array(d["u_hi"]))

    def d_spec(self) -> DisturbanceSpec:
        d = self.data["dynamics"]
        return DisturbanceSpec(np.array(d["d_max"]), np.array(d["ddot_max"]))

    def wind(self) -> WindField | None:
        w = self.data["wind"]
        if not w["enabled"]:
            return None
        # the max-wind altitude is resampled per trajectory; this base value only has to be valid
        return WindField(
            D=w["D"],
            W=w["W"],
            band_bottom=w["band_bottom"],
            band_top=w["band_top"],
            max_wind_altitude=w["band_bottom"] + w["max_alt_lo"],
            canyon_x_ranges=tuple(tuple(c) for c in w["canyon_x_ranges"]),
            taper=w["taper"],
            direction=tuple(w["direction"]),
        )

    def ensembles(self) -> list[EnsembleSpec]:
        s = self.data["solver"]
        return [EnsembleSpec.evenly_spaced(kind, self.d_spec(), k=s["k"]) for kind in s["ensembles"]]

    def sim_settings(self) -> SimSettings:
        r = self.data["run"]
        return SimSettings(
            dt=r["dt"],
            n_steps=r["n_steps"],
            goal_period=r["goal_period"],
            sample_every=self.data["filter"]["sample_every"],
            n_goals=r["n_goals"],
            estimator_horizon=self.data["filter"]["horizon"],
        )


def _floatify(data, ref):
    """Cast ints to floats wherever the default is a float, so ``1`` and ``1.0`` hash alike."""
    if isinstance(ref, dict) and isinstance(data, dict):
        return {k: _floatify(v, ref.get(k)) for k, v in data.items()}
    if isinstance(data, list):
        item_ref = ref[0] if isinstance(ref, list) and ref else None
        return [_floatify(v, item_ref) for v in data]
    if isinstance(ref, float) and isinstance(data, int) and not isinstance(data, bool):
        return float(data)
    return data
