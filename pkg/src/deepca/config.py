"""Experiment configuration documents.

A config is a JSON object with up to four sections: ``model`` (an
architecture record), ``train`` (:class:`~deepca.learning.TrainConfig`
fields), ``data`` (generator name and parameters) and ``run`` (iteration
counts, seeds, tolerances). Every command ships a default document; a user
file is merged over it and the result is validated before any computation.
Unknown keys are rejected.
"""

import copy
import json
from importlib import resources

import jsonschema

__all__ = ["ConfigError", "SCHEMA", "COMMANDS", "default_config", "load_config", "merge", "validate"]

COMMANDS = ("gradcheck", "demo-explaining-away", "demo-sparsity", "demo-inpaint", "train", "infer", "eval")


class ConfigError(ValueError):
    """Invalid experiment configuration."""


_int = {"type": "integer"}
_pos_int = {"type": "integer", "minimum": 1}
_num = {"type": "number"}
_nonneg = {"type": "number", "minimum": 0}

_penalty = {
    "type": "object",
    "properties": {
        "kind": {"enum": ["nonneg_l1", "nonneg", "simplex", "equality", "none"]},
        "bias": _nonneg,
        "learnable": {"type": "boolean"},
        "per_channel": {"type": "boolean"},
        "indices": {"type": "array", "items": {"type": "integer", "minimum": 0}},
        "values": {"type": "array", "items": _num},
    },
    "required": ["kind"],
    "additionalProperties": False,
}

_stage = {
    "type": "object",
    "properties": {
        "kind": {"enum": ["dense", "conv2d"]},
        "units": _pos_int,
        "channels": _pos_int,
        "kernel": _pos_int,
        "stride": _pos_int,
        "pad": {"type": "integer", "minimum": 0},
        "penalty": _penalty,
    },
    "required": ["kind"],
    "additionalProperties": False,
}

SCHEMA = {
    "type": "object",
    "properties": {
        "model": {
            "type": "object",
            "properties": {
                "input_shape": {"type": "array", "items": _pos_int, "minItems": 1},
                "encoder": {"type": "array", "items": _stage},
                "layers": {"type": "array", "items": _stage, "minItems": 1},
                "T": _pos_int,
                "rho": {"type": "number", "exclusiveMinimum": 0},
                "w_update": {"enum": ["auto", "exact", "parseval"]},
            },
            "required": ["input_shape", "layers"],
            "additionalProperties": False,
        },
        "train": {
            "type": "object",
            "properties": {
                "epochs": {"type": "integer", "minimum": 0},
                "batch_size": _pos_int,
                "lr": {"type": "number", "exclusiveMinimum": 0},
                "momentum": {"type": "number", "minimum": 0, "maximum": 1},
                "seed": _int,
                "T": _pos_int,
                "loss": {"enum": ["squared_error", "softmax_cross_entropy"]},
                "readout": {"enum": ["output", "preactivation", "reconstruction"]},
                "learn_bias": {"type": ["boolean", "null"]},
                "clip_norm": {"type": ["number", "null"], "exclusiveMinimum": 0},
            },
            "additionalProperties": False,
        },
        "data": {
            "type": "object",
            "properties": {
                "generator": {"enum": ["gaussian", "dictionary", "depth", "file"]},
                "seed": _int,
                "d": _pos_int,
                "k": _pos_int,
                "coherence": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                "density": {"type": "number", "minimum": 0, "maximum": 1},
                "bias": _nonneg,
                "steps": _pos_int,
                "trials": _pos_int,
                "n_train": _pos_int,
                "n_test": _pos_int,
                "h": _pos_int,
                "w": _pos_int,
                "patches": {"type": "integer", "minimum": 0},
                "mask_density": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "noise": _nonneg,
                "inputs": {"type": "string"},
                "targets": {"type": "string"},
            },
            "required": ["generator"],
            "additionalProperties": False,
        },
        "run": {
            "type": "object",
            "properties": {
                "T_list": {"type": "array", "items": _pos_int, "minItems": 1},
                "seeds": {"type": "array", "items": _int, "minItems": 1},
                "bias_modes": {
                    "type": "array",
                    "items": {"enum": ["fixed", "learnable"]},
                    "minItems": 1,
                },
                "tol": _nonneg,
                "kink_margin": _nonneg,
                "fd_step": {"type": "number", "exclusiveMinimum": 0},
                "batch": _pos_int,
            },
            "additionalProperties": False,
        },
    },
    "additionalProperties": False,
}

_DEFAULT_FILES = {
    "gradcheck": "gradcheck.json",
    "demo-explaining-away": "explaining_away.json",
    "demo-sparsity": "sparsity.json",
    "demo-inpaint": "inpaint.json",
    "train": "train.json",
}


def default_config(command):
    """The built-in config document for ``command`` (empty for commands
    that take none)."""
    name = _DEFAULT_FILES.get(command)
    if name is None:
        return {}
    text = resources.files("deepca").joinpath("configs", name).read_text()
    return json.loads(text)


def merge(base, override):
    """Recursive dict merge; lists and scalars in ``override`` win."""
    out = copy.deepcopy(base)
    for key, val in override.items():
        if isinstance(val, dict) and isinstance(out.get(key), dict):
            out[key] = merge(out[key], val)
        else:
            out[key] = copy.deepcopy(val)
    return out


def validate(cfg):
    try:
        jsonschema.validate(cfg, SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"invalid config at {where}: {exc.message}") from None
    return cfg


def load_config(path=None, command=None, seed=None, iters=None):
    """Resolve a config: command defaults, then ``path``, then flag
    overrides (``seed`` sets data, train and run seeds; ``iters`` sets the
    unrolled iteration count)."""
    cfg = default_config(command) if command else {}
    if path is not None:
        try:
            with open(path) as f:
                user = json.load(f)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON ({exc})") from None
        if not isinstance(user, dict):
            raise ConfigError(f"{path}: top level must be an object")
        cfg = merge(cfg, user)
    if seed is not None:
        for section in ("data", "train"):
            if section in cfg:
                cfg[section]["seed"] = int(seed)
        if "run" in cfg and "seeds" in cfg["run"]:
            cfg["run"]["seeds"] = [int(seed)]
    if iters is not None:
        if "model" in cfg:
            cfg["model"]["T"] = int(iters)
        if "train" in cfg:
            cfg["train"]["T"] = int(iters)
        if "run" in cfg and "T_list" in cfg["run"]:
            cfg["run"]["T_list"] = [int(iters)]
    return validate(cfg)
