"""Experiment configuration: a single self-contained JSON file.

A config has nested blocks ``grid``, ``model``, ``run``, and optionally
``check``.  Initial fields are declared as sine-mode coefficient lists and
projected onto the nonnegative cone (negative parts clipped; the clip
distance is reported in the manifest).  Serialization is canonical (sorted
keys), so the config hash is stable across platforms.
"""

from __future__ import annotations

import hashlib
import json

import numpy as np

from .coefficients import MODEL_CATALOGUE, CoefficientModel, model_from_config
from .grid_noise import SpaceTimeGrid, make_grid, sine_profile

__all__ = [
    "ConfigError",
    "load_config",
    "parse_config",
    "dumps_config",
    "config_hash",
    "validate_config",
    "build_grid",
    "build_model",
    "initial_field",
]

CHECK_NAMES = ("gradient", "log-harnack", "variance", "lipschitz", "continuity", "comparison")


class ConfigError(ValueError):
    """Invalid experiment config; the message names the offending field."""


def parse_config(text: str) -> dict:
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    validate_config(cfg)
    return cfg


def load_config(path) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config(fh.read())


def dumps_config(cfg: dict) -> str:
    return json.dumps(cfg, sort_keys=True, indent=2) + "\n"


def config_hash(cfg: dict) -> str:
    canonical = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]


def _need(block: dict, block_name: str, key: str, types, pred=None, desc=""):
    if key not in block:
        raise ConfigError(f"{block_name}.{key}: missing required field")
    val = block[key]
    if not isinstance(val, types) or isinstance(val, bool):
        raise ConfigError(f"{block_name}.{key}: expected {desc or types}, got {val!r}")
    if pred is not None and not pred(val):
        raise ConfigError(f"{block_name}.{key}: invalid value {val!r} ({desc})")
    return val


def validate_config(cfg: dict) -> None:
    if not isinstance(cfg, dict):
        raise ConfigError("config root must be an object")
    for name in ("grid", "model", "run"):
        if name not in cfg or not isinstance(cfg[name], dict):
            raise ConfigError(f"{name}: missing required block")

    g = cfg["grid"]
    _need(g, "grid", "n_space", int, lambda v: v >= 3, "integer >= 3")
    dt = _need(g, "grid", "dt", (int, float), lambda v: v > 0, "> 0")
    t_final = _need(g, "grid", "t_final", (int, float), lambda v: v >= dt, ">= dt")
    ratio = t_final / dt
    if abs(ratio - round(ratio)) > 1e-3 * max(1.0, ratio):
        raise ConfigError("grid.t_final: not an integer multiple of dt within 0.1%")

    m = cfg["model"]
    name = _need(m, "model", "name", str, lambda v: v in MODEL_CATALOGUE,
                 f"one of {sorted(MODEL_CATALOGUE)}")
    params = m.get("params", {})
    if not isinstance(params, dict):
        raise ConfigError("model.params: must be an object")
    try:
        model_from_config(name, params)
    except TypeError as exc:
        raise ConfigError(f"model.params: {exc}") from exc
    except ValueError as exc:
        raise ConfigError(f"model.params: {exc}") from exc

    r = cfg["run"]
    mode = _need(r, "run", "mode", str, lambda v: v in ("penalized", "reflected"),
                 "'penalized' or 'reflected'")
    if mode == "penalized":
        _need(r, "run", "eps", (int, float), lambda v: v > 0, "> 0")
    _need(r, "run", "n_paths", int, lambda v: v >= 1, "integer >= 1")
    _need(r, "run", "seed", int, lambda v: v >= 0, "integer >= 0")
    if "save_at" in r:
        if not isinstance(r["save_at"], list) or not all(
            isinstance(v, (int, float)) and not isinstance(v, bool) for v in r["save_at"]
        ):
            raise ConfigError("run.save_at: must be a list of times")
    if "eps_ladder" in r:
        lad = r["eps_ladder"]
        if not isinstance(lad, list) or not all(
            isinstance(v, (int, float)) and v > 0 for v in lad
        ):
            raise ConfigError("run.eps_ladder: must be a list of positive numbers")

    if "check" in cfg:
        c = cfg["check"]
        if not isinstance(c, dict):
            raise ConfigError("check: must be an object")
        _need(c, "check", "name", str, lambda v: v in CHECK_NAMES, f"one of {CHECK_NAMES}")
        for key in ("h_modes", "h1_modes", "h2_modes"):
            if key in c and not isinstance(c[key], list):
                raise ConfigError(f"check.{key}: must be a list of mode coefficients")
        if "functional" in c:
            f = c["functional"]
            if not isinstance(f, dict) or "kind" not in f:
                raise ConfigError("check.functional: must be an object with a 'kind'")


def build_grid(cfg: dict) -> SpaceTimeGrid:
    g = cfg["grid"]
    return make_grid(g["n_space"], float(g["dt"]), float(g["t_final"]))


def build_model(cfg: dict) -> CoefficientModel:
    m = cfg["model"]
    return model_from_config(m["name"], m.get("params", {}))


def initial_field(grid: SpaceTimeGrid, modes) -> tuple[np.ndarray, float]:
    """Sine-mode profile projected to the nonnegative cone.

    Returns (field, clip distance in sup norm); projection guarantees the
    run starts inside the admissible set.
    """
    raw = sine_profile(grid, modes or [])
    clipped = np.maximum(raw, 0.0)
    return clipped, float(np.max(clipped - raw, initial=0.0))
