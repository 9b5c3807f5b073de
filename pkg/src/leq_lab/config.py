"""Run configuration: a schema-validated JSON document for the pipeline.

A run config names the environment, dataset, seed and output directory and
carries partial overrides for the agent and world-model settings.  Unknown
keys are rejected everywhere so a typo cannot silently fall back to a
default.  ``desk_scale: true`` applies the laptop preset first; explicit
``agent`` overrides then win, which makes the emitted effective config
(every field resolved) re-parse to an equivalent run.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

import jsonschema

from .agent import AgentConfig
from .datasets import NORMALIZATION_MODES
from .world_model import WorldModelConfig

__all__ = [
    "ConfigError",
    "RunConfig",
    "RUN_SCHEMA",
    "MATRIX_SCHEMA",
    "load_run_config",
    "load_matrix_config",
]

PRETRAIN_STAGES = ("world_model", "bc", "fqe")

_SCALAR_SCHEMAS = {
    float: {"type": "number"},
    int: {"type": "integer"},
    str: {"type": "string"},
    bool: {"type": "boolean"},
}


class ConfigError(ValueError):
    """A run or matrix config violates the schema or its invariants."""


def _fields_schema(cls) -> dict:
    """Property schema derived from a config dataclass's field defaults."""
    props = {}
    for f in dataclasses.fields(cls):
        default = getattr(cls, f.name)
        if isinstance(default, tuple):
            props[f.name] = {
                "type": "array",
                "items": {"type": "integer", "minimum": 1},
            }
        elif isinstance(default, bool):
            props[f.name] = _SCALAR_SCHEMAS[bool]
        else:
            props[f.name] = _SCALAR_SCHEMAS[type(default)]
    return props


RUN_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "additionalProperties": False,
    "required": ["seed", "env", "dataset"],
    "properties": {
        "seed": {"type": "integer", "minimum": 0},
        "env": {"type": "string"},
        "dataset": {"type": "string"},
        "out_dir": {"type": "string"},
        "desk_scale": {"type": "boolean"},
        "reward_normalization": {"enum": list(NORMALIZATION_MODES)},
        "agent": {
            "type": "object",
            "additionalProperties": False,
            "properties": _fields_schema(AgentConfig),
        },
        "world_model": {
            "type": "object",
            "additionalProperties": False,
            "properties": _fields_schema(WorldModelConfig),
        },
        "stages": {
            "type": "array",
            "items": {"enum": list(PRETRAIN_STAGES)},
            "uniqueItems": True,
        },
        "eval_interval": {"type": "integer", "minimum": 1},
        "eval_episodes": {"type": "integer", "minimum": 1},
        "log_interval": {"type": "integer", "minimum": 1},
        "checkpoint_interval": {"type": "integer", "minimum": 1},
    },
}

MATRIX_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "additionalProperties": False,
    "required": ["base", "cells", "seeds"],
    "properties": {
        "base": RUN_SCHEMA,
        "seeds": {
            "type": "array",
            "items": {"type": "integer", "minimum": 0},
            "minItems": 1,
        },
        "cells": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "additionalProperties": False,
                "required": ["agent"],
                "properties": {
                    "name": {"type": "string"},
                    "agent": RUN_SCHEMA["properties"]["agent"],
                },
            },
        },
    },
}


@dataclass(frozen=True)
class RunConfig:
    """Fully resolved run settings; build with ``from_dict``."""

    seed: int
    env: str
    dataset: str
    agent: AgentConfig
    world_model: WorldModelConfig
    out_dir: str | None = None
    desk_scale: bool = False
    reward_normalization: str = "none"
    stages: tuple[str, ...] = PRETRAIN_STAGES
    eval_interval: int = 5000
    eval_episodes: int = 50
    log_interval: int = 100
    checkpoint_interval: int = 5000

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        try:
            jsonschema.validate(raw, RUN_SCHEMA)
        except jsonschema.ValidationError as err:
            raise ConfigError(f"run config: {err.message}") from err
        agent = AgentConfig()
        if raw.get("desk_scale", False):
            agent = agent.desk_scale()
        try:
            agent = dataclasses.replace(agent, **_tupled(raw.get("agent", {})))
            wm = dataclasses.replace(
                WorldModelConfig(), **_tupled(raw.get("world_model", {}))
            )
        except (ValueError, TypeError) as err:
            raise ConfigError(str(err)) from err
        return cls(
            seed=int(raw["seed"]),
            env=raw["env"],
            dataset=raw["dataset"],
            agent=agent,
            world_model=wm,
            out_dir=raw.get("out_dir"),
            desk_scale=bool(raw.get("desk_scale", False)),
            reward_normalization=raw.get("reward_normalization", "none"),
            stages=tuple(raw.get("stages", PRETRAIN_STAGES)),
            eval_interval=int(raw.get("eval_interval", 5000)),
            eval_episodes=int(raw.get("eval_episodes", 50)),
            log_interval=int(raw.get("log_interval", 100)),
            checkpoint_interval=int(raw.get("checkpoint_interval", 5000)),
        )

    def effective_dict(self) -> dict:
        """Every field resolved; re-parses to an equivalent RunConfig."""
        d = {
            "seed": self.seed,
            "env": self.env,
            "dataset": self.dataset,
            "desk_scale": self.desk_scale,
            "reward_normalization": self.reward_normalization,
            "agent": self.agent.to_dict(),
            "world_model": self.world_model.to_dict(),
            "stages": list(self.stages),
            "eval_interval": self.eval_interval,
            "eval_episodes": self.eval_episodes,
            "log_interval": self.log_interval,
            "checkpoint_interval": self.checkpoint_interval,
        }
        if self.out_dir is not None:
            d["out_dir"] = self.out_dir
        return d


def _tupled(overrides: dict) -> dict:
    out = dict(overrides)
    for key, value in out.items():
        if isinstance(value, list):
            out[key] = tuple(value)
    return out


def load_run_config(path) -> RunConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except OSError as err:
        raise ConfigError(f"cannot read config {path}: {err}") from err
    except json.JSONDecodeError as err:
        raise ConfigError(f"{path} is not valid JSON: {err}") from err
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: run config must be a JSON object")
    return RunConfig.from_dict(raw)


def load_matrix_config(path) -> dict:
    """Ablation matrix: validated raw dict (cells stay as override dicts)."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except OSError as err:
        raise ConfigError(f"cannot read matrix config {path}: {err}") from err
    except json.JSONDecodeError as err:
        raise ConfigError(f"{path} is not valid JSON: {err}") from err
    try:
        jsonschema.validate(raw, MATRIX_SCHEMA)
    except jsonschema.ValidationError as err:
        raise ConfigError(f"matrix config: {err.message}") from err
    RunConfig.from_dict(raw["base"])  # surface base-config value errors early
    return raw
