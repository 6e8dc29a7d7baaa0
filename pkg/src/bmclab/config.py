"""Run configuration: JSON schema, dataclasses, defaults and echo.

A config file drives one study.  List values for the sweepable experiment
keys (``horizon``, ``trajectories``, ``epsilon``, ``cap``) expand into the
cartesian product of runs; run ``i`` gets master seed
``SeedSequence([seed, i])``.
"""
from __future__ import annotations

import copy
import itertools
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

import jsonschema

from .rng import check_seed, derived_seed

STUDIES = ("simulate", "martingale", "positivity", "boundary", "disappear", "gw", "green", "inequalities", "check", "boundary-table")
SWEEPABLE = ("horizon", "trajectories", "epsilon", "cap")


class ConfigError(ValueError):
    """Invalid configuration; ``field`` names the offending entry."""

    def __init__(self, field_: str, message: str):
        super().__init__(f"config error at '{field_}': {message}")
        self.field = field_


_num = {"type": "number"}
_int = {"type": "integer"}


def _sweep(base):
    return {"oneOf": [base, {"type": "array", "items": base, "minItems": 1}]}


_offspring = {
    "type": "object",
    "required": ["kind"],
    "properties": {
        "kind": {"enum": ["delta", "geometric", "explicit", "heavy_tail"]},
        "k": {**_int, "minimum": 1},
        "q": {**_num, "exclusiveMinimum": 0, "maximum": 1},
        "mean": {**_num, "minimum": 1},
        "pmf": {"type": ["array", "object"]},
        "k0": {**_int, "minimum": 2},
        "k_max": {**_int, "minimum": 3},
    },
    "additionalProperties": False,
    "allOf": [
        {"if": {"properties": {"kind": {"const": "delta"}}}, "then": {"required": ["k"]}},
        {"if": {"properties": {"kind": {"const": "explicit"}}}, "then": {"required": ["pmf"]}},
        {
            "if": {"properties": {"kind": {"const": "geometric"}}},
            "then": {"anyOf": [{"required": ["q"]}, {"required": ["mean"]}]},
        },
    ],
}

SCHEMA = {
    "type": "object",
    "required": ["state_space", "branching"],
    "properties": {
        "study": {"enum": list(STUDIES)},
        "seed": {**_int, "minimum": 0},
        "state_space": {
            "type": "object",
            "required": ["type"],
            "properties": {
                "type": {"enum": ["tree", "free_group", "explicit"]},
                "degree": {**_int, "minimum": 2},
                "rank": {**_int, "minimum": 1},
                "step_law": {},
                "states": {"type": "array", "items": {"type": "string"}},
                "matrix": {"type": "array", "items": {"type": "array", "items": _num}},
                "rows": {"type": "object"},
            },
            "additionalProperties": False,
            "allOf": [
                {"if": {"properties": {"type": {"const": "tree"}}}, "then": {"required": ["degree"]}},
                {"if": {"properties": {"type": {"const": "free_group"}}}, "then": {"required": ["rank"]}},
                {"if": {"properties": {"type": {"const": "explicit"}}}, "then": {"required": ["states"]}},
            ],
        },
        "branching": {
            "type": "object",
            "required": ["offspring"],
            "properties": {
                "mode": {"enum": ["independent", "independent_bd", "vertex_coupled", "mixture"]},
                "lambda": {**_num, "minimum": 0, "maximum": 1},
                "offspring": _offspring,
                "overrides": {
                    "type": "array",
                    "items": {
                        "type": "object",
                        "required": ["offspring"],
                        "properties": {
                            "band": {"type": "array", "items": _int, "minItems": 2, "maxItems": 2},
                            "state": {"type": "string"},
                            "offspring": _offspring,
                        },
                        "additionalProperties": False,
                    },
                },
                "require_constant_rho": {"type": "boolean"},
            },
            "additionalProperties": False,
        },
        "experiment": {
            "type": "object",
            "properties": {
                "initial": {"type": ["object", "array"]},
                "horizon": _sweep({**_int, "minimum": 0}),
                "trajectories": _sweep({**_int, "minimum": 1}),
                "cap": _sweep({**_int, "minimum": 1}),
                "epsilon": _sweep({**_num, "exclusiveMinimum": 0}),
                "watched": {"type": "array", "items": {"type": "string"}},
                "test_function": {"type": ["array", "object", "string", "null"]},
                "table_depth": {**_int, "minimum": 1},
                "s_grid": {"type": "array", "items": {**_num, "exclusiveMinimum": 0}},
                "multiples": {"type": "array", "items": {**_int, "minimum": 1}},
                "exact_vertices": {"type": "boolean"},
                "sigma": {**_num, "exclusiveMinimum": 0},
                "max_truncated_fraction": {**_num, "minimum": 0, "maximum": 1},
                "pilot_band": {"type": ["string", "null"]},
                "early_step": {**_int, "minimum": 0},
                "rel_tol": {**_num, "exclusiveMinimum": 0},
                "bc_tol": {**_num, "exclusiveMinimum": 0},
                "bc_fraction": {**_num, "minimum": 0, "maximum": 1},
                "cauchy_window": {**_int, "minimum": 1},
                "n_max": {**_int, "minimum": 2},
                "green_radius": {**_int, "minimum": 0},
                "pipe_populations": {"type": "array", "items": {"type": ["object", "array"]}},
                "gw_bins": {"type": "array", "items": _num, "minItems": 3, "maxItems": 3},
                "snapshot_steps": {"type": "array", "items": {**_int, "minimum": 0}},
            },
            "additionalProperties": False,
        },
        "output": {
            "type": "object",
            "properties": {"format": {"enum": ["csv", "json"]}},
            "additionalProperties": False,
        },
    },
    "additionalProperties": False,
}


@dataclass
class ExperimentConfig:
    initial: Any = None
    horizon: Any = 15
    trajectories: Any = 1000
    cap: Any = 10_000_000
    epsilon: Any = 1e-3
    watched: list = field(default_factory=list)
    test_function: Any = None
    table_depth: int = 2
    s_grid: list = field(default_factory=lambda: [0.05, 0.1, 0.2])
    multiples: list = field(default_factory=lambda: [1, 2, 3])
    exact_vertices: bool = False
    sigma: float = 3.0
    max_truncated_fraction: float = 0.05
    pilot_band: str | None = None
    early_step: int = 5
    rel_tol: float = 0.05
    bc_tol: float = 0.05
    bc_fraction: float = 0.95
    cauchy_window: int = 5
    n_max: int = 2000
    green_radius: int = 2
    pipe_populations: list = field(default_factory=list)
    gw_bins: list = field(default_factory=lambda: [0.1, 3.0, 10])
    snapshot_steps: list = field(default_factory=list)


@dataclass
class RunConfig:
    state_space: dict
    branching: dict
    experiment: ExperimentConfig = field(default_factory=ExperimentConfig)
    study: str | None = None
    seed: int = 0
    format: str = "json"

    def echo(self) -> dict:
        """Fully resolved config; loading it reproduces the run."""
        out = {
            "study": self.study,
            "seed": self.seed,
            "state_space": copy.deepcopy(self.state_space),
            "branching": copy.deepcopy(self.branching),
            "experiment": asdict(self.experiment),
            "output": {"format": self.format},
        }
        if out["study"] is None:
            del out["study"]
        return out

    def sweep(self) -> list["RunConfig"]:
        """Expand list-valued sweepable keys; single runs keep their seed."""
        e = self.experiment
        keys = [k for k in SWEEPABLE if isinstance(getattr(e, k), list)]
        if not keys:
            return [self]
        runs = []
        for i, combo in enumerate(itertools.product(*[getattr(e, k) for k in keys])):
            c = copy.deepcopy(self)
            for k, v in zip(keys, combo):
                setattr(c.experiment, k, v)
            c.seed = derived_seed(self.seed, i)
            runs.append(c)
        return runs


def _path(err: jsonschema.ValidationError) -> str:
    parts = [str(p) for p in err.absolute_path]
    if err.validator == "required":
        missing = err.message.split("'")[1] if "'" in err.message else "?"
        parts.append(missing)
    elif err.validator == "additionalProperties" and "'" in err.message:
        parts.append(err.message.split("'")[1])
    return ".".join(parts) or "<root>"


def validate(raw: dict) -> None:
    v = jsonschema.Draft202012Validator(SCHEMA)
    errs = sorted(v.iter_errors(raw), key=lambda e: (len(list(e.absolute_path)), str(list(e.absolute_path))))
    if errs:
        e = errs[0]
        # descend into oneOf/anyOf/allOf context for a precise field name
        while e.context:
            e = sorted(e.context, key=lambda x: -len(list(x.absolute_path)))[0]
        raise ConfigError(_path(e), e.message)


def from_dict(raw: dict, study: str | None = None, seed: int | None = None, fmt: str | None = None) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("<root>", "config must be a JSON object")
    validate(raw)
    exp_raw = dict(raw.get("experiment", {}))
    known = {f.name for f in fields(ExperimentConfig)}
    exp = ExperimentConfig(**{k: v for k, v in exp_raw.items() if k in known})
    s = raw.get("seed", 0) if seed is None else seed
    try:
        s = check_seed(s)
    except ValueError as e:
        raise ConfigError("seed", str(e)) from None
    cfg = RunConfig(
        state_space=copy.deepcopy(raw["state_space"]),
        branching=copy.deepcopy(raw["branching"]),
        experiment=exp,
        study=study or raw.get("study"),
        seed=s,
        format=fmt or raw.get("output", {}).get("format", "json"),
    )
    return cfg


def load(path: str | Path, **overrides) -> RunConfig:
    p = Path(path)
    try:
        raw = json.loads(p.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError("--config", f"file not found: {p}") from None
    except json.JSONDecodeError as e:
        raise ConfigError("--config", f"invalid JSON: {e}") from None
    return from_dict(raw, **overrides)


DEFAULT_CONFIG = {
    "state_space": {"type": "tree", "degree": 3, "step_law": "simple"},
    "branching": {"mode": "independent", "offspring": {"kind": "geometric", "q": 0.5}},
    "experiment": {"initial": {"-": 1}, "horizon": 12, "trajectories": 200},
}
