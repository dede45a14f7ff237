"""Scenario files: JSON schema, validation with line-addressed errors, and builders."""

from __future__ import annotations

import json
import re
from fractions import Fraction

import jsonschema

from .adversary import from_config
from .errors import ConfigurationError
from .protocol import ProtocolParams, RoundDistribution

KINDS = ("verify", "simulate", "diagram", "sweep", "multi-target", "select", "sensor")

_int = {"type": "integer"}
_nonneg = {"type": "integer", "minimum": 0}
_pos = {"type": "integer", "minimum": 1}
_num = {"type": "number"}
_prob = {"oneOf": [{"type": "number", "minimum": 0}, {"type": "string", "pattern": r"^\s*\d+\s*(/\s*\d+\s*)?$"}]}

ROUNDS = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "uniform": _pos,
        "point": _pos,
        "probabilities": {"type": "object", "patternProperties": {r"^[1-9]\d*$": _prob}, "additionalProperties": False},
    },
    "minProperties": 1,
    "maxProperties": 1,
}

ATTACKER = {
    "type": "object",
    "additionalProperties": False,
    "required": ["name"],
    "properties": {
        "name": {"enum": ["all_one", "all_zero", "all_one_all_zero", "random_p", "fixed_sequence"]},
        "p": {"type": "number", "minimum": 0, "maximum": 1},
        "seed": _nonneg,
        "ones": {"type": "array", "items": _nonneg},
        "rounds": {"type": "array"},
        "label": {"type": "string"},
    },
}

OBSERVATIONS = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "fixed": {"type": "array", "items": {"enum": [0, 1]}},
        "counts": {"type": "array", "items": _nonneg, "minItems": 1},
    },
    "minProperties": 1,
    "maxProperties": 1,
}

PROTOCOL = {
    "n": _pos,
    "t": _nonneg,
    "k": _pos,
    "lambda": _nonneg,
    "lambdas": {"type": "array", "items": _nonneg},
    "rounds": ROUNDS,
}

INSTANCE = {
    "type": "object",
    "additionalProperties": False,
    "required": ["n", "thresholds", "rewards"],
    "properties": {
        "n": _pos,
        "t": _nonneg,
        "thresholds": {"type": "array", "items": _pos, "minItems": 1},
        "rewards": {"type": "array", "items": _num},
        "availability": {"type": "array", "items": {"type": "array", "items": _nonneg}},
        "observations": {"type": "array", "items": _nonneg},
    },
}

PARAMS = {
    "verify": {
        **PROTOCOL,
        "mode": {"enum": ["exhaustive", "monte_carlo"]},
        "attacker": ATTACKER,
        "observations": OBSERVATIONS,
    },
    "simulate": {**PROTOCOL, "attacker": ATTACKER, "observations": OBSERVATIONS},
    "diagram": {"n": _pos, "t": _nonneg, "k": _pos, "r_max": _pos},
    "sweep": {
        "n": _pos,
        "k": _pos,
        "t": _nonneg,
        "horizon": _pos,
        "max_observers": _nonneg,
        "rounds": ROUNDS,
        "attackers": {"type": "array", "items": ATTACKER, "minItems": 1},
        "lambdas": {"type": "array", "items": {"oneOf": [_nonneg, {"type": "array", "items": _nonneg}]}, "minItems": 1},
        "metric": {"enum": ["success", "reward", "clean_success"]},
        "death_cost": _num,
    },
    "multi-target": {
        "instance": INSTANCE,
        "lambda": _nonneg,
        "attacker": ATTACKER,
        "q": _pos,
        "rounds": ROUNDS,
        "dispersion_check": {"type": "boolean"},
    },
    "select": {
        "instances": {"type": "array", "items": INSTANCE},
        "random": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"count": _pos, "max_m": _pos, "max_n": _pos, "max_k": _pos, "p": {"type": "number", "minimum": 0, "maximum": 1}},
        },
    },
    "sensor": {
        "world": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "preset": {"enum": ["default", "counterexample", "small"]},
                "positions": {"type": "array", "items": _num, "minItems": 1},
                "count": _pos,
                "spacing": {"type": "number", "exclusiveMinimum": 0},
                "sensing_radius": {"type": "number", "exclusiveMinimum": 0},
                "neighborhood_radius": {"type": "number", "exclusiveMinimum": 0},
                "grid_width": {"type": "number", "exclusiveMinimum": 0},
                "noise_bound": {"type": "number", "minimum": 0},
                "noise": {"enum": ["uniform", "gaussian"]},
                "attacker_ids": {"type": "array", "items": _nonneg},
            },
        },
        "trajectory": {"type": "array", "items": {"type": "array", "items": _num, "minItems": 2, "maxItems": 2}, "minItems": 1},
        "horizon": _pos,
        "mode": {"enum": ["consensus", "vanilla"]},
        "attacker": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"name": {"enum": ["silent", "ones", "random"]}, "p": {"type": "number", "minimum": 0, "maximum": 1}, "fake": _num},
        },
        "rounds": ROUNDS,
    },
}


def schema_for(kind: str) -> dict:
    return {
        "type": "object",
        "additionalProperties": False,
        "required": ["kind"],
        "properties": {
            "kind": {"const": kind},
            "seed": {"type": "integer", "minimum": 0, "maximum": 2**64 - 1},
            "trials": _pos,
            "budget": _pos,
            "params": {"type": "object", "additionalProperties": False, "properties": PARAMS[kind]},
        },
    }


SCENARIO_SCHEMA = {
    "type": "object",
    "required": ["kind"],
    "properties": {"kind": {"enum": list(KINDS)}},
}


def _line_of(text: str, path) -> int:
    """Best-effort line number of a JSON path inside ``text``."""
    pos = 0
    for key in path:
        if isinstance(key, str):
            m = re.compile(r'"%s"\s*:' % re.escape(key)).search(text, pos)
            if m is None:
                break
            pos = m.start()
        else:
            # skip to the key-th element of the array that follows
            start = text.find("[", pos)
            if start < 0:
                break
            depth, idx, i = 0, 0, start
            while i < len(text):
                ch = text[i]
                if ch in "[{":
                    depth += 1
                    if depth == 2 and idx == key:
                        pos = i
                        break
                elif ch in "]}":
                    depth -= 1
                    if depth == 0:
                        break
                elif ch == "," and depth == 1:
                    idx += 1
                    if idx == key:
                        pos = i + 1
                        while pos < len(text) and text[pos].isspace():
                            pos += 1
                        break
                i += 1
    return text.count("\n", 0, pos) + 1


def load_scenario(text: str, expect_kind: str) -> dict:
    """Parse and validate; raises ConfigurationError with a ``line N:`` prefix."""
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"line {exc.lineno}: invalid JSON: {exc.msg}") from None
    if not isinstance(data, dict):
        raise ConfigurationError("line 1: scenario must be a JSON object")
    for schema in (SCENARIO_SCHEMA, schema_for(expect_kind) if expect_kind in KINDS else SCENARIO_SCHEMA):
        validator = jsonschema.Draft202012Validator(schema)
        errors = sorted(validator.iter_errors(data), key=lambda e: list(e.absolute_path))
        if errors:
            err = errors[0]
            path = list(err.absolute_path)
            where = "/".join(str(p) for p in path) or "(root)"
            if err.validator == "additionalProperties" and isinstance(err.instance, dict):
                # point at the first unexpected key rather than its parent
                extra = [key for key in err.instance if key not in err.schema.get("properties", {})]
                if extra:
                    path.append(extra[0])
            raise ConfigurationError(f"line {_line_of(text, path)}: {where}: {err.message}")
    if data["kind"] != expect_kind:
        raise ConfigurationError(f"line {_line_of(text, ['kind'])}: scenario kind {data['kind']!r} does not match command {expect_kind!r}")
    return data


def round_dist(spec, default_r_max: int = 5) -> RoundDistribution:
    if not spec:
        return RoundDistribution.uniform(default_r_max)
    if "uniform" in spec:
        return RoundDistribution.uniform(spec["uniform"])
    if "point" in spec:
        return RoundDistribution.point(spec["point"])
    return RoundDistribution.from_mapping({int(r): Fraction(str(p)) for r, p in spec["probabilities"].items()})


def protocol_params(params: dict, default_r_max: int = 5) -> ProtocolParams:
    try:
        return ProtocolParams(
            params.get("n", 5),
            params.get("t", 1),
            params.get("k", 3),
            params.get("lambda"),
            round_dist(params.get("rounds"), default_r_max),
        )
    except KeyError as exc:
        raise ConfigurationError(f"missing parameter {exc}") from None


def attacker(spec: dict):
    return from_config(spec or {"name": "all_one"})
