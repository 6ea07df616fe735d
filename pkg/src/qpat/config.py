"""Run configuration: YAML files validated against a JSON schema.

A config file only needs the keys it changes; everything else comes from
:data:`DEFAULTS`. Grids are given as cell counts per side of the square
``[-1, 1]^2``, so ``cells: 40`` means ``h = 2/40``.
"""

from __future__ import annotations

import copy

import jsonschema
import yaml

from .experiment import ALGORITHMS, Scenario
from .grid import SIDES
from .mull import MullConfig, PenaltyWeights
from .optim_standard import OptimConfig


class ConfigError(ValueError):
    pass


DEFAULTS: dict = {
    "seed": 0,
    "phantom": "desk",
    "algorithm": "pg",
    "warm_start": True,
    "checkpoint_every": 0,
    "sides": list(SIDES),
    "optics": {"g": 0.5, "bounds": [3.0, 6.0]},
    "data": {"cells": 50, "n_theta": 32, "noise_level": 0.0},
    "reconstruction": {"cells": 40, "n_theta": 16},
    "acoustics": {"R": 1.8, "n_det": 128, "t_max": 4.0, "dt": None},
    "optim": {
        "lam": 2e-8,
        "step": 0.5,
        "step_schedule": "constant",
        "max_iter": 10,
        "batch_size": 1,
        "tau": 1.5,
        "estimate_mu_s": False,
        "dykstra_max_iter": 50,
        "dykstra_tol": 1e-8,
    },
    "mull": {
        "max_iter": 1000,
        "inner_steps": 40,
        "line_search": True,
        "step": 0.5,
        "estimate_mu_s": False,
        "dykstra_in_projected": False,
        "dykstra_max_iter": 50,
        "dykstra_tol": 1e-8,
        "divergence_factor": 1e6,
    },
    "weights": {"a1": 1.0, "a2": 1.0, "a3": 1.0, "lam": 2e-8},
}

_pos = {"type": "number", "exclusiveMinimum": 0}
_nonneg = {"type": "number", "minimum": 0}
_count = {"type": "integer", "minimum": 1}
_flag = {"type": "boolean"}


def _obj(props: dict) -> dict:
    return {"type": "object", "additionalProperties": False, "properties": props}


SCHEMA: dict = _obj(
    {
        "seed": {"type": "integer", "minimum": 0},
        "phantom": {"enum": ["desk"]},
        "algorithm": {"enum": list(ALGORITHMS)},
        "warm_start": _flag,
        "checkpoint_every": {"type": "integer", "minimum": 0},
        "sides": {"type": "array", "items": {"enum": list(SIDES)}, "minItems": 1, "uniqueItems": True},
        "optics": _obj({"g": {"type": "number", "exclusiveMinimum": -1, "exclusiveMaximum": 1},
                        "bounds": {"type": "array", "items": _pos, "minItems": 2, "maxItems": 2}}),
        "data": _obj({"cells": _count, "n_theta": {"type": "integer", "minimum": 4}, "noise_level": _nonneg}),
        "reconstruction": _obj({"cells": _count, "n_theta": {"type": "integer", "minimum": 4}}),
        "acoustics": _obj({"R": _pos, "n_det": {"type": "integer", "minimum": 4}, "t_max": _pos,
                           "dt": {"anyOf": [_pos, {"type": "null"}]}}),
        "optim": _obj({
            "lam": _nonneg, "step": _pos, "step_schedule": {"enum": ["constant", "inv_sqrt"]},
            "max_iter": {"type": "integer", "minimum": 0}, "batch_size": _count,
            "tau": {"type": "number", "exclusiveMinimum": 1}, "estimate_mu_s": _flag,
            "dykstra_max_iter": _count, "dykstra_tol": _pos,
        }),
        "mull": _obj({
            "max_iter": {"type": "integer", "minimum": 0}, "inner_steps": _count, "line_search": _flag,
            "step": _pos, "estimate_mu_s": _flag, "dykstra_in_projected": _flag,
            "dykstra_max_iter": _count, "dykstra_tol": _pos, "divergence_factor": _pos,
        }),
        "weights": _obj({"a1": _pos, "a2": _pos, "a3": _pos, "lam": _nonneg}),
    }
)


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _describe(err: jsonschema.ValidationError) -> str:
    where = ".".join(str(p) for p in err.absolute_path) or "<top level>"
    if err.validator == "additionalProperties":
        extra = sorted(set(err.instance) - set(err.schema.get("properties", {})))
        return f"unknown key(s) {', '.join(map(repr, extra))} in {where}"
    return f"{where}: {err.message}"


def validate(cfg: dict) -> None:
    errors = sorted(jsonschema.Draft202012Validator(SCHEMA).iter_errors(cfg), key=lambda e: list(e.absolute_path))
    if errors:
        raise ConfigError("invalid config: " + "; ".join(_describe(e) for e in errors))


def resolve(overrides: dict | None = None, seed: int | None = None) -> dict:
    """Validate ``overrides`` and merge them into the defaults."""
    overrides = overrides or {}
    if not isinstance(overrides, dict):
        raise ConfigError("config must be a mapping at the top level")
    validate(overrides)
    cfg = _merge(DEFAULTS, overrides)
    if seed is not None:
        cfg["seed"] = int(seed)
    validate(cfg)
    return cfg


def load(path, seed: int | None = None) -> dict:
    try:
        with open(path) as fh:
            raw = yaml.safe_load(fh)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML ({exc})") from exc
    return resolve(raw or {}, seed)


def dump(cfg: dict) -> str:
    return yaml.safe_dump(cfg, sort_keys=True, default_flow_style=False)


def to_scenario(cfg: dict) -> Scenario:
    """Build the :class:`Scenario` described by a resolved config."""
    o, m, w, ac = cfg["optim"], cfg["mull"], cfg["weights"], cfg["acoustics"]
    seed = cfg["seed"]
    try:
        return Scenario(
            sides=tuple(cfg["sides"]),
            h_data=2 / cfg["data"]["cells"],
            n_theta_data=cfg["data"]["n_theta"],
            h_rec=2 / cfg["reconstruction"]["cells"],
            n_theta_rec=cfg["reconstruction"]["n_theta"],
            g=cfg["optics"]["g"],
            R=ac["R"],
            n_det=ac["n_det"],
            t_max=ac["t_max"],
            dt=ac["dt"],
            noise_level=cfg["data"]["noise_level"],
            noise_seed=seed,
            bounds=tuple(cfg["optics"]["bounds"]),
            algorithm=cfg["algorithm"],
            optim=OptimConfig(seed=seed, checkpoint_every=cfg["checkpoint_every"], **o),
            mull=MullConfig(seed=seed, checkpoint_every=cfg["checkpoint_every"], **m),
            weights=PenaltyWeights(**w),
            warm_start=cfg["warm_start"],
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
