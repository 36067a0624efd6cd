"""Run configuration: INI files with one section per module.

Resolution order, later wins: built-in defaults, config file, environment
variables named ``MFCSWARM_<SECTION>_<KEY>``, command-line flags.
"""

from __future__ import annotations

import configparser
import copy
import json
import os
from pathlib import Path

from .collision import ApfConfig
from .envs import EnvConfig, EnvKind
from .meanfield import GridSpec
from .ppo import PpoConfig
from .sim_core import SpaceConfig

ENV_PREFIX = "MFCSWARM_"

DEFAULTS: dict[str, dict] = {
    "run": {
        "seed": 0,
        "out": "runs/latest",
        "checkpoint": "",
        "marl": False,
        "episodes": 100,
        "n_list": [10, 50, 100, 300],
        "crep_list": [0.01, 0.1, 1.0],
        "t_list": [10],
        "deterministic": True,
        "ref_particles": 10_000,
        "ensemble_particles": 300,
    },
    "env": {
        "kind": "aggregation",
        "n_agents": 300,
        "horizon": 0,
        "box_half_width": 2.0,
        "action_radius": 0.2,
        "noise_std": [0.0, 0.0],
        "bins_per_axis": 6,
        "move_cost": 0.3,
        "task_arrival_rate": 0.4,
        "max_tasks": 5,
        "initial_task_length": 10.0,
        "task_radius": 0.5,
        "target_samples": 300,
        "min_separation": 0.0,
        "per_bin_actions": True,
    },
    "ppo": {
        "gamma": 0.99,
        "gae_lambda": 1.0,
        "kl_coeff": 0.03,
        "kl_target": 0.01,
        "clip_param": 0.2,
        "learning_rate": 5e-5,
        "train_batch": 4000,
        "minibatch": 1000,
        "epochs": 5,
        "iterations": 100,
        "vf_coeff": 1.0,
        "entropy_coeff": 0.0,
        "grad_clip": 0.5,
        "hidden": [256, 256],
        "n_envs": 8,
        "checkpoint_every": 10,
    },
    "apf": {
        "attract_gain": 1.5,
        "rep_gain_base": 1.5,
        "interaction_radius": 1.0,
        "inner_dt": 0.02,
        "inner_steps": 100,
        "speed_cap": None,
        "init_separation": 0.1,
    },
}

# keys whose default is None but which hold floats when set
_OPTIONAL_FLOAT = {("apf", "speed_cap"), ("ppo", "grad_clip")}


class ConfigError(ValueError):
    """Unknown key or unparseable value in a run configuration."""


def _coerce(section: str, key: str, raw):
    if section not in DEFAULTS or key not in DEFAULTS[section]:
        raise ConfigError(f"unknown config key [{section}] {key}")
    default = DEFAULTS[section][key]
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    try:
        if (section, key) in _OPTIONAL_FLOAT:
            return None if text.lower() in ("", "none", "off") else float(text)
        if isinstance(default, bool):
            if text.lower() in ("1", "true", "yes", "on"):
                return True
            if text.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, list):
            parts = [p for p in text.replace(";", ",").split(",") if p.strip()]
            caster = float if default and isinstance(default[0], float) else int
            return [caster(p) for p in parts]
    except ValueError as exc:
        raise ConfigError(f"bad value for [{section}] {key}: {raw!r}") from exc
    return text


def parse_list(text: str, caster=float) -> list:
    return [caster(p) for p in str(text).split(",") if p.strip()]


def load_config(path=None, overrides: dict | None = None, environ=None) -> dict:
    """Resolve a configuration dict ``{section: {key: value}}``.

    ``path`` may be an INI file or a run manifest (JSON); for a manifest the
    stored snapshot replaces the defaults and environment variables are not
    consulted, so a rerun sees exactly what the original run saw.
    """
    cfg = copy.deepcopy(DEFAULTS)
    from_manifest = False
    if path:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        if p.suffix == ".json":
            with open(p) as fh:
                doc = json.load(fh)
            snap = doc.get("config", doc)
            for section, values in snap.items():
                for key, value in values.items():
                    cfg[section][key] = _coerce(section, key, value)
            from_manifest = "config" in doc
        else:
            parser = configparser.ConfigParser()
            parser.read(p)
            for section in parser.sections():
                if section not in cfg:
                    raise ConfigError(f"unknown config section [{section}]")
                for key, value in parser.items(section):
                    cfg[section][key] = _coerce(section, key, value)
    if not from_manifest:
        environ = os.environ if environ is None else environ
        for section, values in cfg.items():
            for key in values:
                name = f"{ENV_PREFIX}{section.upper()}_{key.upper()}"
                if name in environ:
                    values[key] = _coerce(section, key, environ[name])
    for (section, key), value in (overrides or {}).items():
        if value is not None:
            cfg[section][key] = _coerce(section, key, value)
    return cfg


def write_ini(cfg: dict, path) -> None:
    parser = configparser.ConfigParser()
    for section, values in cfg.items():
        parser[section] = {
            k: ("none" if v is None else ",".join(map(str, v)) if isinstance(v, list) else str(v))
            for k, v in values.items()
        }
    with open(path, "w") as fh:
        parser.write(fh)


def env_config(cfg: dict, **changes) -> EnvConfig:
    e = dict(cfg["env"], **changes)
    space = SpaceConfig(e["box_half_width"], e["action_radius"], tuple(e["noise_std"]))
    grid = GridSpec(e["bins_per_axis"], e["box_half_width"])
    return EnvConfig(
        kind=EnvKind.parse(e["kind"]),
        horizon=e["horizon"] or None,
        n_agents=e["n_agents"],
        space=space,
        grid=grid,
        move_cost=e["move_cost"],
        task_arrival_rate=e["task_arrival_rate"],
        max_tasks=e["max_tasks"],
        initial_task_length=e["initial_task_length"],
        task_radius=e["task_radius"],
        target_samples=e["target_samples"],
        min_separation=e["min_separation"],
        per_bin_actions=e["per_bin_actions"],
    )


def ppo_config(cfg: dict) -> PpoConfig:
    return PpoConfig(**cfg["ppo"])


def apf_config(cfg: dict, c_rep: float) -> ApfConfig:
    return ApfConfig(c_rep=c_rep, **cfg["apf"])
