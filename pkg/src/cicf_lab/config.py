"""Experiment configuration: JSON schema, defaults and dotted-path overrides."""
from __future__ import annotations

import copy
import json
from pathlib import Path

import jsonschema

from .errors import ConfigError

_posint = {"type": "integer", "minimum": 1}

CONFIG_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "cicf-lab experiment",
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "data": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "preset": {"type": "string"},
                "generator": {"type": "object"},
                "csv": {"type": "string"},
                "csv_schema": {"type": "object"},
                "normalize": {"type": "boolean"},
                "seed": {"type": ["integer", "null"], "minimum": 0},
            },
        },
        "model": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "hidden": {"type": "array", "items": _posint},
                "activation": {"enum": ["relu", "tanh"]},
                "split_index": {"type": "integer", "minimum": 0},
            },
        },
        "clustering": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "K": _posint,
                "space": {"enum": ["raw_input", "encoder_output"]},
                "max_iter": _posint,
            },
        },
        "training": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "alpha": {"type": "number", "minimum": 0},
                "beta": {"type": "number", "minimum": 0},
                "epochs": {"type": "integer", "minimum": 0},
                "M": _posint,
                "M_l": _posint,
                "outer_mode": {"enum": ["first_order", "exact_hvp"]},
                "allocation_scheme": {"enum": ["proportional", "equal"]},
                "outer_sampler": {"enum": ["uniform", "per_cluster"]},
                "virtual_scope": {"enum": ["full", "head"]},
                "maml_tasks": {"enum": ["domain", "random"]},
                "hvp_eps": {"type": "number", "exclusiveMinimum": 0},
            },
        },
        "analysis": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "trials": {"type": "integer", "minimum": 100},
                "M_sweep": {"type": "array", "items": _posint, "minItems": 1},
                "compare_M": _posint,
                "compare_iterations": {"type": "integer", "minimum": 1},
            },
        },
        "output": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"directory": {"type": "string"}},
        },
        "seeds": {"type": "array", "items": {"type": "integer", "minimum": 0}, "minItems": 1},
        "domains": {"type": "array", "items": {"type": "integer", "minimum": 0}},
    },
}

DEFAULTS = {
    "data": {"preset": "confounded-3", "normalize": True, "seed": None},
    "model": {"hidden": [16], "activation": "tanh", "split_index": 1},
    "clustering": {"K": 3, "space": "raw_input", "max_iter": 100},
    "training": {
        "alpha": 0.05, "beta": 0.01, "epochs": 60, "M": 256, "M_l": 84,
        "outer_mode": "first_order", "allocation_scheme": "proportional",
        "outer_sampler": "uniform", "virtual_scope": "full", "maml_tasks": "domain",
        "hvp_eps": 1e-4,
    },
    "analysis": {"trials": 100000, "M_sweep": [4, 8, 16], "compare_M": 256,
                 "compare_iterations": 1000},
    "output": {"directory": "out"},
    "seeds": [0],
}


def _error_path(err: jsonschema.ValidationError) -> str:
    path = ".".join(str(p) for p in err.absolute_path)
    if err.validator == "additionalProperties":
        extra = sorted(set(err.instance) - set(err.schema.get("properties", {})))
        key = ".".join(filter(None, [path, extra[0] if extra else ""]))
        return f"unknown key '{key}'"
    return f"invalid value at '{path or '<root>'}': {err.message}"


def validate(cfg: dict, schema: dict = CONFIG_SCHEMA) -> None:
    try:
        jsonschema.validate(cfg, schema)
    except jsonschema.ValidationError as err:
        raise ConfigError(_error_path(err)) from None


def merge(base: dict, top: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in top.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(cfg: dict, assignment: str) -> dict:
    """Apply one ``a.b.c=value`` override; value is parsed as JSON when possible."""
    if "=" not in assignment:
        raise ConfigError(f"--set expects KEY=VALUE, got {assignment!r}")
    key, raw = assignment.split("=", 1)
    parts = key.strip().split(".")
    node = cfg
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"cannot set '{key}': '{p}' is not a section")
    node[parts[-1]] = _parse_value(raw)
    return cfg


def load(path, overrides=(), out_dir: str | None = None, seed: int | None = None) -> dict:
    """Read, override, validate and fill defaults. Raises ConfigError or OSError."""
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be an object")
    for ov in overrides:
        apply_override(raw, ov)
    if out_dir is not None:
        raw.setdefault("output", {})["directory"] = out_dir
    if seed is not None:
        raw["seeds"] = [seed]
    validate(raw)
    data = raw.get("data", {})
    if sum(k in data for k in ("preset", "generator", "csv")) > 1:
        raise ConfigError("data: give only one of 'preset', 'generator', 'csv'")
    base = copy.deepcopy(DEFAULTS)
    if data:
        base["data"] = {"normalize": True, "seed": None}
        if not any(k in data for k in ("preset", "generator", "csv")):
            base["data"]["preset"] = DEFAULTS["data"]["preset"]
    cfg = merge(base, raw)
    if "csv" in cfg["data"] and not Path(cfg["data"]["csv"]).is_absolute():
        cfg["data"]["csv"] = str((path.parent / cfg["data"]["csv"]).resolve())
    validate(cfg)
    return cfg
