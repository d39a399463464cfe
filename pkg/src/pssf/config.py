"""Scenario configuration: one flat YAML file per scenario, strictly validated.

Unknown keys are errors everywhere (no silent typos). ``validate_config``
merges a user config onto the documented defaults and returns the fully
resolved dictionary, which every run writes beside its outputs so any
artifact can be reproduced from what sits next to it.
"""

from __future__ import annotations

import copy
from pathlib import Path

import jsonschema
import yaml

from .dynamics import SegwayParams


class ConfigError(ValueError):
    """Invalid, unknown, or ill-typed scenario configuration content."""


_SEGWAY_FIELDS = list(SegwayParams.__dataclass_fields__)

DEFAULT_CONFIG = {
    "system": {
        "body_mass": 44.8,
        "wheel_mass": 2.0,
        "com_length": 0.8,
        "body_inertia": 6.0,
        "wheel_radius": 0.195,
        "gravity": 9.81,
        "viscous_friction": 0.1,
        "motor_torque_scale": 1.0,
        "perturbation": {
            "scale": {"body_mass": 1.15, "body_inertia": 0.85, "motor_torque_scale": 0.9},
            "drop_friction": True,
        },
    },
    "barrier": {
        "pitch_max": 0.3,
        "pitch_rate_max": 1.0,
        "alpha": {"family": "linear", "k": 1.0},
    },
    "controller": {
        "kp": 220.0,
        "kd": 45.0,
        "u_max": 100.0,
        "reference": {"amplitude": 0.25, "frequency": 0.45},
        "excitation": {"amplitude": 0.0, "hold_steps": 20},
    },
    "learning": {
        "enabled": True,
        "episodes": 5,
        "episode_duration": 10.0,
        "features": {"kind": "polynomial", "max_degree": 2, "indices": [1, 2, 3], "seed": 0},
        "ridge_lambda": 1.0e-3,
        "excitation": {"amplitude": 8.0, "hold_steps": 20},
        "x0_jitter": None,
        "noise_std": None,
    },
    "run": {
        "duration": 10.0,
        "dt": 1.0e-3,
        "seed": 0,
        "x0": [0.0, 0.0, 0.0, 0.0],
    },
}

_NUMBER = {"type": "number"}
_POSITIVE = {"type": "number", "exclusiveMinimum": 0}
_NONNEGATIVE = {"type": "number", "minimum": 0}

_EXCITATION_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "amplitude": _NONNEGATIVE,
        "hold_steps": {"type": "integer", "minimum": 1},
    },
}

_FEATURES_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "kind": {"enum": ["polynomial", "random_fourier"]},
        "max_degree": {"type": "integer", "minimum": 1},
        "count": {"type": "integer", "minimum": 1},
        "bandwidth": _POSITIVE,
        "seed": {"type": "integer"},
        "indices": {"type": "array", "items": {"type": "integer", "minimum": 0, "maximum": 3}},
    },
    "required": ["kind"],
}

SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["system", "barrier", "controller", "learning", "run"],
    "properties": {
        "system": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                **{name: _POSITIVE for name in _SEGWAY_FIELDS if name != "viscous_friction"},
                "viscous_friction": _NONNEGATIVE,
                "perturbation": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {
                        "scale": {
                            "type": "object",
                            "propertyNames": {"enum": _SEGWAY_FIELDS},
                            "additionalProperties": _POSITIVE,
                        },
                        "drop_friction": {"type": "boolean"},
                    },
                },
            },
        },
        "barrier": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "pitch_max": _POSITIVE,
                "pitch_rate_max": _POSITIVE,
                "alpha": {"type": "object"},
            },
        },
        "controller": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "kp": _NUMBER,
                "kd": _NUMBER,
                "u_max": _POSITIVE,
                "reference": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {"amplitude": _NONNEGATIVE, "frequency": _NONNEGATIVE},
                },
                "excitation": _EXCITATION_SCHEMA,
            },
        },
        "learning": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "enabled": {"type": "boolean"},
                "episodes": {"type": "integer", "minimum": 1},
                "episode_duration": _POSITIVE,
                "features": _FEATURES_SCHEMA,
                "ridge_lambda": _POSITIVE,
                "excitation": _EXCITATION_SCHEMA,
                "x0_jitter": {
                    "anyOf": [
                        {"type": "null"},
                        {"type": "array", "items": _NONNEGATIVE, "minItems": 4, "maxItems": 4},
                    ]
                },
                "noise_std": {
                    "anyOf": [
                        {"type": "null"},
                        _NONNEGATIVE,
                        {"type": "array", "items": _NONNEGATIVE, "minItems": 4, "maxItems": 4},
                    ]
                },
            },
        },
        "run": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "duration": _NONNEGATIVE,
                "dt": _POSITIVE,
                "seed": {"type": "integer"},
                "x0": {"type": "array", "items": _NUMBER, "minItems": 4, "maxItems": 4},
            },
        },
    },
}


# Blocks whose keys form one value (a scaling map, a function family spec):
# a user override replaces them wholesale instead of merging with defaults.
_REPLACE_PATHS = {
    ("system", "perturbation", "scale"),
    ("barrier", "alpha"),
    ("learning", "features"),
}


def _deep_merge(base: dict, override: dict, path: tuple = ()) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        here = path + (key,)
        if isinstance(value, dict) and isinstance(out.get(key), dict) and here not in _REPLACE_PATHS:
            out[key] = _deep_merge(out[key], value, here)
        else:
            out[key] = copy.deepcopy(value)
    return out


def validate_config(user: dict) -> dict:
    """Merge onto defaults and validate; returns the fully resolved config."""
    if not isinstance(user, dict):
        raise ConfigError(f"config must be a mapping, got {type(user).__name__}")
    resolved = _deep_merge(DEFAULT_CONFIG, user)
    try:
        jsonschema.validate(resolved, SCHEMA)
    except jsonschema.ValidationError as exc:
        path = ".".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"config error at {path}: {exc.message}") from exc

    # The alpha block has family-specific keys; the comparison-function
    # parser is the authority on those.
    from . import kfun

    try:
        kfun.from_config(resolved["barrier"]["alpha"])
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"config error at barrier.alpha: {exc}") from exc

    features = resolved["learning"]["features"]
    if features["kind"] == "polynomial" and "max_degree" not in features:
        raise ConfigError("config error at learning.features: polynomial needs max_degree")
    if features["kind"] == "random_fourier" and not {"count", "bandwidth"} <= set(features):
        raise ConfigError("config error at learning.features: random_fourier needs count and bandwidth")
    return resolved


def load_config(path) -> dict:
    """Read a YAML scenario file and return the resolved config."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        with open(path) as fh:
            user = yaml.safe_load(fh)
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    if user is None:
        user = {}
    return validate_config(user)


def save_config(cfg: dict, path) -> None:
    """Write a resolved config as YAML (deterministic key order)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="\n") as fh:
        yaml.safe_dump(cfg, fh, sort_keys=True)


def set_by_path(cfg: dict, dotted: str, value: float) -> dict:
    """Return a copy of cfg with the numeric leaf at `a.b.c` replaced."""
    keys = dotted.split(".")
    out = copy.deepcopy(cfg)
    node = out
    for key in keys[:-1]:
        if not isinstance(node, dict) or key not in node:
            raise ConfigError(f"no config entry at {dotted!r}")
        node = node[key]
    leaf = keys[-1]
    if not isinstance(node, dict) or leaf not in node:
        raise ConfigError(f"no config entry at {dotted!r}")
    if isinstance(node[leaf], bool) or not isinstance(node[leaf], (int, float)):
        raise ConfigError(f"config entry at {dotted!r} is not numeric")
    node[leaf] = int(value) if isinstance(node[leaf], int) and float(value).is_integer() else float(value)
    return out
