"""Run configuration: JSON schema, defaults and validation."""

from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path
from typing import Any

import jsonschema

TWO_PI = 6.283185307179586

DEFAULTS: dict[str, Any] = {
    "grid": {"n": 32, "box_len": TWO_PI},
    "material": {"c1": 1.0, "c2": 0.5, "b_coef": 0.5, "gamma": [0.4, 0.1]},
    "data": {
        "kind": "rough",
        "s_div": 3.1,
        "s_curl": 3.1,
        "amp_div": 0.05,
        "amp_curl": 0.05,
        "seed": None,
        "mode": [1, 0, 0],
        "velocity": "zero",
        "amp_vel": 0.0,
    },
    "time": {"t_end": 1.0, "cfl_safety": 0.4, "out_stride": 1, "dt": None, "force": False},
    "checks": [],
    "output_dir": "ewlab_run",
    "seed": 0,
}

_num = {"type": "number"}
_opt_num = {"type": ["number", "null"]}

SCHEMA: dict[str, Any] = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "grid": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"n": {"type": "integer", "minimum": 8}, "box_len": {"type": "number", "exclusiveMinimum": 0}},
        },
        "material": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "c1": {"type": "number", "exclusiveMinimum": 0},
                "c2": {"type": "number", "exclusiveMinimum": 0},
                "b_coef": _num,
                "gamma": {"type": "array", "items": _num},
            },
        },
        "data": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "kind": {"enum": ["rough", "plane", "mixed"]},
                "s_div": {"type": "number", "exclusiveMinimum": 0},
                "s_curl": {"type": "number", "exclusiveMinimum": 0},
                "amp_div": {"type": "number", "minimum": 0},
                "amp_curl": {"type": "number", "minimum": 0},
                "seed": {"type": ["integer", "null"], "minimum": 0},
                "mode": {"type": "array", "items": {"type": "integer"}, "minItems": 3, "maxItems": 3},
                "velocity": {"enum": ["zero", "traveling", "rough"]},
                "amp_vel": {"type": "number", "minimum": 0},
            },
        },
        "time": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "t_end": {"type": "number", "minimum": 0},
                "cfl_safety": {"type": "number", "exclusiveMinimum": 0},
                "out_stride": {"type": "integer", "minimum": 1},
                "dt": _opt_num,
                "force": {"type": "boolean"},
            },
        },
        "checks": {"type": "array", "items": {"type": "string"}},
        "output_dir": {"type": "string"},
        "seed": {"type": "integer", "minimum": 0},
    },
}


class ConfigError(ValueError):
    """Configuration could not be parsed or failed validation."""


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def validate_config(raw: dict) -> dict:
    """Validate against the schema and return the config with defaults filled in."""
    try:
        jsonschema.validate(raw, SCHEMA)
    except jsonschema.ValidationError as exc:
        path = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"invalid config at {path}: {exc.message}") from None
    cfg = _merge(DEFAULTS, raw)
    n = cfg["grid"]["n"]
    if n & (n - 1):
        raise ConfigError("grid/n must be a power of two")
    mat = cfg["material"]
    if not mat["c1"] > mat["c2"]:
        raise ConfigError("material: need c1 > c2")
    if cfg["data"]["seed"] is None:
        cfg["data"]["seed"] = cfg["seed"]
    return cfg


def load_config(path: str | Path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"malformed JSON: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    return validate_config(raw)


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(canonical_json(cfg).encode("utf-8")).hexdigest()


def make_config(**sections: Any) -> dict:
    """Validated config from keyword overrides, e.g. ``make_config(time={"t_end": 0.5})``."""
    return validate_config(sections)
