"""Run configuration: one JSON document validated against a published schema."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import jsonschema

from .coefficients import FAULTS, LQSpec, ProblemSpec, inject_fault, lq_to_problem
from .errors import ConfigError
from .optimizer import SolveConfig
from .problems import BUILTIN_LQ, builtin_lq, get_problem

SCHEMA_VERSION = 1

_num = {"type": "number"}
_matrix = {"anyOf": [_num, {"type": "array"}]}
_lq_props = {k: _matrix for k in LQSpec.FIELDS}
_lq_props.update({"n": {"type": "integer", "minimum": 1},
                  "d": {"type": "integer", "minimum": 1},
                  "t0": _num, "T": _num, "name": {"type": "string"},
                  "lam": {"type": ["number", "null"]},
                  "lipschitz": {"type": ["number", "null"]}})

CONFIG_SCHEMA = {
    "$schema": "http://json-schema.org/draft-07/schema#",
    "title": "run config",
    "type": "object",
    "additionalProperties": False,
    "required": ["schema_version", "problem"],
    "properties": {
        "schema_version": {"const": SCHEMA_VERSION},
        "problem": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "builtin": {"enum": sorted(BUILTIN_LQ)},
                "custom": {"type": "string"},
                "lq": {"type": "object", "additionalProperties": False,
                       "properties": _lq_props},
                "params": {"type": "object"},
                "fault": {"enum": sorted(FAULTS)},
            },
            "oneOf": [{"required": ["builtin"]}, {"required": ["custom"]},
                      {"required": ["lq"]}],
        },
        "grid": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"K": {"type": "integer", "minimum": 1},
                           "N": {"type": "integer", "minimum": 1},
                           "seed": {"type": "integer", "minimum": 0}},
        },
        "solve": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "mode": {"enum": ["gradient", "picard", "mfg"]},
                "max_iters": {"type": "integer", "minimum": 0},
                "eta": {"type": "number", "exclusiveMinimum": 0},
                "beta": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "tol_grad": {"type": "number", "exclusiveMinimum": 0},
                "tol_cost": {"type": "number", "exclusiveMinimum": 0},
                "theta": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                "basis_degree": {"type": "integer", "minimum": 0},
                "ridge": {"type": ["number", "null"], "minimum": 0},
                "estimator": {"enum": ["joint", "plain"]},
                "precheck": {"type": "boolean"},
            },
        },
        "outputs": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "directory": {"type": "string"},
                "csv": {"type": "array", "uniqueItems": True,
                        "items": {"enum": ["convergence", "control", "trajectory",
                                           "adjoint", "gains"]}},
                "max_particles": {"type": ["integer", "null"], "minimum": 1},
                "figures": {"type": "boolean"},
            },
        },
        "checks": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "pointwise": {"type": "object", "additionalProperties": False,
                              "properties": {"samples": {"type": "integer", "minimum": 1},
                                             "h": {"type": "number", "exclusiveMinimum": 0},
                                             "tol": {"type": "number", "exclusiveMinimum": 0}}},
                "measure": {"type": "object", "additionalProperties": False,
                            "properties": {"samples": {"type": "integer", "minimum": 1},
                                           "eps": {"type": "number", "exclusiveMinimum": 0},
                                           "tol": {"type": "number", "exclusiveMinimum": 0}}},
                "convexity": {"type": "object", "additionalProperties": False,
                              "properties": {"mode": {"enum": ["control-only", "joint"]},
                                             "samples": {"type": "integer", "minimum": 1},
                                             "lam": {"type": "number", "exclusiveMinimum": 0}}},
                "monotonicity": {"type": "object", "additionalProperties": False,
                                 "properties": {
                                     "modes": {"type": "array", "items": {
                                         "enum": ["displacement", "lasry-lions"]}},
                                     "samples": {"type": "integer", "minimum": 1}}},
                "gradcheck": {"type": "object", "additionalProperties": False,
                              "properties": {"directions": {"type": "integer", "minimum": 1},
                                             "eps": {"type": "number", "exclusiveMinimum": 0},
                                             "tol": {"type": "number", "exclusiveMinimum": 0},
                                             "crn": {"type": "boolean"}}},
            },
        },
    },
}

_row = {"type": "object"}
REPORT_SCHEMA = {
    "$schema": "http://json-schema.org/draft-07/schema#",
    "title": "run report",
    "type": "object",
    "required": ["schema_version", "command", "status", "problem"],
    "properties": {
        "schema_version": {"const": SCHEMA_VERSION},
        "command": {"enum": ["validate", "solve", "gradcheck", "oracle"]},
        "status": {"enum": ["ok", "failed", "error"]},
        "problem": {"type": "string"},
        "error": {"anyOf": [{"type": "null"},
                            {"type": "object", "required": ["name", "message"]}]},
        "checks": {"type": "object", "additionalProperties": {
            "type": "object", "required": ["pass"]}},
        "solve": {"type": "object",
                  "required": ["mode", "converged", "reason", "iterations", "final_cost",
                               "history"]},
        "oracle": {"type": ["object", "null"]},
        "gradcheck": {"type": "object", "required": ["pass", "max_error", "rows"]},
        "artifacts": {"type": "array", "items": {"type": "string"}},
    },
}


@dataclass
class RunConfig:
    raw: dict
    problem: ProblemSpec
    lq: Optional[LQSpec]
    K: int
    N: int
    seed: int
    solve: SolveConfig
    outputs: dict = field(default_factory=dict)
    checks: dict = field(default_factory=dict)


def _locate(text: str, exc: json.JSONDecodeError) -> str:
    return f"line {exc.lineno}, column {exc.colno}: {exc.msg}"


def parse_config(doc: dict, seed_override: Optional[int] = None) -> RunConfig:
    try:
        jsonschema.validate(doc, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"config field {where}: {exc.message}") from exc
    prob = doc["problem"]
    params = prob.get("params", {})
    lq = None
    try:
        if "builtin" in prob:
            lq = builtin_lq(prob["builtin"], **params)
        elif "lq" in prob:
            lq = LQSpec.from_dict(prob["lq"])
        if lq is not None:
            problem = lq_to_problem(lq)
        else:
            problem = get_problem(prob["custom"], **params)
        if "fault" in prob:
            problem = inject_fault(problem, prob["fault"])
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"config field problem: {exc}") from exc
    grid = doc.get("grid", {})
    seed = int(grid.get("seed", 0) if seed_override is None else seed_override)
    N = int(grid.get("N", 1000))
    solve_kw = dict(doc.get("solve", {}))
    try:
        solve = SolveConfig(N=N, seed=seed, **solve_kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"config field solve: {exc}") from exc
    outputs = {"directory": "mfc_out", "csv": ["convergence", "control", "trajectory"],
               "max_particles": 200, "figures": True}
    outputs.update(doc.get("outputs", {}))
    return RunConfig(raw=doc, problem=problem, lq=lq, K=int(grid.get("K", 100)), N=N,
                     seed=seed, solve=solve, outputs=outputs, checks=doc.get("checks", {}))


def load_config(path, seed_override: Optional[int] = None) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: {_locate(text, exc)}") from exc
    return parse_config(doc, seed_override)
