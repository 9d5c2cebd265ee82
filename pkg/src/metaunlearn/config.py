"""Experiment configuration: one YAML document drives the whole pipeline.

Defaults are embedded; a config file overrides them block-wise and individual
keys can be overridden from the command line by dotted path. The resolved
config is hashed (canonical JSON) so runs are content-addressed and diffable.
All randomness derives from the explicit seeds below (no wall-clock defaults).
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import yaml

from .attack import AttackConfig, CompareBands
from .diffusion import ModelConfig, NoiseSchedule, make_schedule
from .meta import MetaConfig
from .unlearn import UnlearnConfig

SCHEMA_VERSION = 1

DEFAULT_CONFIG: dict = {
    "schema_version": SCHEMA_VERSION,
    "seed": 42,
    "world": {
        "embed_dim": 8,
        "spread": 0.3,
        "related_cosine": 0.6,
        "unrelated_cosine_cap": 0.8,
        "centers": {"F": [2.0, 2.0], "R": [2.5, 2.5], "U1": [-2.0, 2.0], "U2": [-2.0, -2.0]},
    },
    "data": {"forget": 512, "retain_per_concept": 512, "ft_pool": 256, "benign": 512},
    "model": {"data_dim": 2, "hidden": 32, "time_dim": 16, "embed_dim": 8, "tokens": 1, "activation": "silu"},
    "schedule": {"timesteps": 100, "beta_start": 1.0e-4, "beta_end": 0.02},
    "pretrain": {"steps": 6000, "lr": 1.0e-3, "batch": 64, "optimizer": "adam"},
    "unlearn": {
        "method": "esd",
        "eta": 1.0,
        "mask": "u",
        "steps": 1000,
        "lr": 1.0e-3,
        "batch": 16,
        "optimizer": "sgd",
        "ema": 0.999,
        "lam": 1.0,
        "lam1": 0.5,
        "lam2": 0.01,
        "rece_lam": 0.1,
        "rece_iters": 3,
        "xt_from_model": False,
        "xt_pool_size": 512,
    },
    "meta": {
        "outer_steps": 1000,
        "inner_steps": 1,
        "inner_lr": 1.0e-3,
        "outer_lr": 1.0e-3,
        "gamma1": 1.0,
        "gamma2": 0.1,
        "zeta": 1.0,
        "ft_batch": 16,
        "retain_batch": 32,
        "mode": "exact",
        "two_stage": None,
        "meta_mask": None,
    },
    "attack": {
        "dataset": "ft_single",
        "optimizer": "sgd",
        "lr": 1.0e-3,
        "checkpoints_at": [50, 100, 200, 300],
        "batch": 32,
        "seeds": [21, 22, 23],
        "paraphrases": 5,
        "paraphrase_scale": 0.1,
    },
    "eval": {"samples": 500, "loss_samples": 256, "mmd_samples": 1000, "seed": 7},
    "compare": {"self_destruct_threshold": 2.0, "benign_band": 15.0, "min_dominance": 3},
}

# Derivation indices for per-stage random streams (SeedSequence spawn keys).
# The meta stage reuses the "unlearn" stream for its unlearning-gradient
# branch so that disabling the meta term reproduces the unlearn stage bit for
# bit; its own draws come from a stream spawned off that one.
STAGE_KEYS = {"world": 0, "data": 1, "pretrain": 2, "unlearn": 3}


class ConfigError(ValueError):
    """Invalid configuration; message carries the offending field path."""


def _deep_merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, val in override.items():
        here = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"{here}: unknown configuration key")
        if isinstance(base[key], dict) and isinstance(val, dict):
            out[key] = _deep_merge(base[key], val, here)
        else:
            out[key] = copy.deepcopy(val)
    return out


def load_config(path=None, overrides: list[str] | None = None, seed: int | None = None) -> dict:
    """Resolve the full config: defaults <- file <- --set overrides <- --seed."""
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path is not None:
        try:
            doc = yaml.safe_load(Path(path).read_text())
        except yaml.YAMLError as err:
            raise ConfigError(f"config file {path}: {err}") from err
        if not isinstance(doc, dict):
            raise ConfigError(f"config file {path}: expected a mapping at the top level")
        version = doc.get("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise ConfigError(f"schema_version: unsupported version {version!r}")
        cfg = _deep_merge(cfg, doc)
    for item in overrides or []:
        cfg = _apply_override(cfg, item)
    if seed is not None:
        cfg["seed"] = int(seed)
    validate_config(cfg)
    return cfg


def _apply_override(cfg: dict, item: str) -> dict:
    if "=" not in item:
        raise ConfigError(f"--set expects dotted.key=value, got {item!r}")
    key, raw = item.split("=", 1)
    try:
        value = yaml.safe_load(raw)
    except yaml.YAMLError as err:
        raise ConfigError(f"{key}: unparseable value {raw!r}: {err}") from err
    parts = key.split(".")
    node = cfg
    for part in parts[:-1]:
        if not isinstance(node, dict) or part not in node:
            raise ConfigError(f"{key}: unknown configuration key")
        node = node[part]
    if not isinstance(node, dict) or parts[-1] not in node:
        raise ConfigError(f"{key}: unknown configuration key")
    node[parts[-1]] = value
    return cfg


def config_hash(cfg: dict) -> str:
    canon = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()[:12]


# ---------------------------------------------------------------------------
# Typed views and validation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Experiment:
    """Typed view of the resolved configuration."""

    raw: dict
    seed: int
    model: ModelConfig
    schedule: NoiseSchedule
    unlearn: UnlearnConfig
    meta: MetaConfig
    compare: CompareBands

    def attack_config(self, seed: int, dataset: str | None = None) -> AttackConfig:
        a = self.raw["attack"]
        e = self.raw["eval"]
        return AttackConfig(
            dataset=dataset or a["dataset"],
            optimizer=a["optimizer"],
            lr=a["lr"],
            checkpoints_at=tuple(a["checkpoints_at"]),
            batch=a["batch"],
            seed=seed,
            paraphrases=a["paraphrases"],
            paraphrase_scale=a["paraphrase_scale"],
            eval_samples=e["samples"],
            eval_loss_samples=e["loss_samples"],
            eval_seed=e["seed"],
        )

    def stage_rng(self, stage: str) -> np.random.Generator:
        return np.random.default_rng(self.stage_seed(stage))

    def stage_seed(self, stage: str) -> np.random.SeedSequence:
        return np.random.SeedSequence(self.seed, spawn_key=(STAGE_KEYS[stage],))


def _build(block: str, ctor, kwargs: dict):
    try:
        return ctor(**kwargs)
    except (TypeError, ValueError) as err:
        raise ConfigError(f"{block}: {err}") from err


def validate_config(cfg: dict) -> "Experiment":
    if cfg.get("schema_version") != SCHEMA_VERSION:
        raise ConfigError(f"schema_version: expected {SCHEMA_VERSION}")
    if not isinstance(cfg.get("seed"), int):
        raise ConfigError("seed: must be an integer (explicit, no wall-clock defaults)")

    model = _build("model", ModelConfig, cfg["model"])
    if model.embed_dim != cfg["world"]["embed_dim"]:
        raise ConfigError("model.embed_dim: must match world.embed_dim")
    sched = _build("schedule", make_schedule, cfg["schedule"])

    p = cfg["pretrain"]
    if p["steps"] < 0 or p["lr"] <= 0 or p["batch"] < 1:
        raise ConfigError("pretrain: steps must be >= 0, lr > 0, batch >= 1")
    if p["optimizer"] not in ("sgd", "sgd_momentum", "adam"):
        raise ConfigError(f"pretrain.optimizer: unknown optimizer {p['optimizer']!r}")

    ucfg = _build("unlearn", UnlearnConfig, cfg["unlearn"])
    m = dict(cfg["meta"])
    mcfg = _build("meta", MetaConfig, {**m, "unlearn": ucfg})

    for name in ("forget", "retain_per_concept", "ft_pool", "benign"):
        if cfg["data"][name] < 1:
            raise ConfigError(f"data.{name}: must be positive")

    a = cfg["attack"]
    _build("attack", AttackConfig, {k: (tuple(v) if k == "checkpoints_at" else v) for k, v in a.items() if k != "seeds"})
    if not a["seeds"]:
        raise ConfigError("attack.seeds: at least one seed required")

    e = cfg["eval"]
    if e["samples"] < 100:
        raise ConfigError("eval.samples: must be >= 100 (forget-score precondition)")
    if e["mmd_samples"] < 2:
        raise ConfigError("eval.mmd_samples: must be >= 2")

    c = cfg["compare"]
    bands = _build("compare", CompareBands, {k: c[k] for k in ("self_destruct_threshold", "benign_band")})
    if not (0 <= c["min_dominance"] <= len(a["checkpoints_at"])):
        raise ConfigError("compare.min_dominance: out of range for the attack schedule")

    return Experiment(raw=cfg, seed=cfg["seed"], model=model, schedule=sched, unlearn=ucfg, meta=mcfg, compare=bands)
