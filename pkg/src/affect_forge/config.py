"""Run configuration: a flat ``section.key=value`` text format.

Example::

    mode=MTL
    model.backbone=hrnet_lite
    train.lr=0.0005
    train.epochs.joint=10
    data.train=data/manifest.csv

``#`` starts a comment.  Flag overrides use the same keys.  Every value
is validated against the consuming module before any work starts.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping

from .losses import P_CLAMP, RATIO_CLAMP
from .model import ModelConfig
from .train import STAGES, TrainConfig

SEED_ENV = "AFFECT_FORGE_SEED"
DEFAULT_EPOCHS = {"pretrain_backbone": 20, "frozen_backbone": 30, "joint": 10}

_MODEL_KEYS = ("backbone", "input_size", "d_model", "n_heads", "d_ff", "n_encoder_layers", "n_expr_classes",
               "n_aus", "tasks")
_TRAIN_KEYS = {"lr": float, "batch_size": int, "beta1": float, "beta2": float, "eps": float}


class ConfigError(ValueError):
    """Unknown key, unparsable value, or a value rejected by validation."""


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _optional_float(text: str) -> float | None:
    return None if text.strip().lower() in ("none", "off", "") else float(text)


@dataclass
class RunConfig:
    mode: str = "MTL"
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    epochs: dict[str, int] = field(default_factory=lambda: dict(DEFAULT_EPOCHS))
    seed: int = 0
    pretrain_samples: int = 500
    data_train: str | None = None
    data_val: str | None = None
    out_dir: str = "runs"

    def to_items(self) -> dict[str, str]:
        """Flat items that :func:`parse_items` maps back to an equal config."""
        t = self.train
        items = {"mode": self.mode, "train.seed": str(self.seed), "train.lr": repr(t.lr),
                 "train.batch_size": str(t.batch_size), "train.beta1": repr(t.beta1), "train.beta2": repr(t.beta2),
                 "train.eps": repr(t.eps), "train.clip_norm": "none" if t.clip_norm is None else repr(t.clip_norm),
                 "train.augment": str(t.augment).lower(), "train.pretrain_samples": str(self.pretrain_samples),
                 "loss.lambda_expr": repr(t.task_weights[0]), "loss.lambda_au": repr(t.task_weights[1]),
                 "loss.lambda_va": repr(t.task_weights[2]), "loss.p_clamp": repr(t.p_clamp),
                 "loss.ratio_clamp": repr(t.ratio_clamp), "data.out": self.out_dir}
        items.update({f"train.epochs.{k}": str(v) for k, v in self.epochs.items()})
        items.update(self.model.to_items())
        if self.data_train is not None:
            items["data.train"] = self.data_train
        if self.data_val is not None:
            items["data.val"] = self.data_val
        return items


def parse_text(text: str, source: str = "<config>") -> dict[str, str]:
    items: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {raw.strip()!r}")
        items[key.strip()] = value.strip()
    return items


def parse_items(items: Mapping[str, str]) -> RunConfig:
    """Build and validate a :class:`RunConfig` from flat items."""
    items = dict(items)
    mode = items.pop("mode", "MTL").upper()
    if mode not in ("MTL", "LSD"):
        raise ConfigError(f"mode must be MTL or LSD, got {mode!r}")
    run = RunConfig(mode=mode)
    cfg_kwargs: dict = {"mode": mode}
    weights = list(run.train.task_weights)
    model_items: dict[str, str] = {}
    try:
        for key, value in items.items():
            section, _, name = key.partition(".")
            if section == "model" and name in _MODEL_KEYS:
                model_items[name] = value
            elif section == "train" and name in _TRAIN_KEYS:
                cfg_kwargs[name] = _TRAIN_KEYS[name](value)
            elif key == "train.clip_norm":
                cfg_kwargs["clip_norm"] = _optional_float(value)
            elif key == "train.augment":
                cfg_kwargs["augment"] = _bool(value)
            elif key == "train.seed":
                run.seed = int(value)
            elif key == "train.pretrain_samples":
                run.pretrain_samples = int(value)
            elif section == "train" and name.startswith("epochs.") and name[7:] in STAGES:
                run.epochs[name[7:]] = int(value)
            elif key in ("loss.lambda_expr", "loss.lambda_au", "loss.lambda_va"):
                weights[("loss.lambda_expr", "loss.lambda_au", "loss.lambda_va").index(key)] = float(value)
            elif key == "loss.p_clamp":
                cfg_kwargs["p_clamp"] = float(value)
            elif key == "loss.ratio_clamp":
                cfg_kwargs["ratio_clamp"] = float(value)
            elif key == "data.train":
                run.data_train = value
            elif key == "data.val":
                run.data_val = value or None
            elif key == "data.out":
                run.out_dir = value
            else:
                raise ConfigError(f"unknown config key {key!r}")
        run.model = ModelConfig.for_mode(mode, **_model_overrides(model_items))
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from None
    cfg_kwargs["task_weights"] = tuple(weights)
    run.train = TrainConfig(**cfg_kwargs)
    _validate(run)
    return run


def _model_overrides(model_items: dict[str, str]) -> dict:
    if not model_items:
        return {}
    prefixed = {f"model.{k}": v for k, v in model_items.items()}
    full = ModelConfig.from_items({**ModelConfig().to_items(), **prefixed})
    return {k: getattr(full, k) for k in model_items}


def _validate(run: RunConfig) -> None:
    t = run.train
    if not t.lr > 0:
        raise ConfigError("train.lr must be positive")
    if t.batch_size < 1:
        raise ConfigError("train.batch_size must be >= 1")
    if not (0 <= t.beta1 < 1 and 0 <= t.beta2 < 1):
        raise ConfigError("train.beta1/beta2 must lie in [0, 1)")
    if not t.eps > 0:
        raise ConfigError("train.eps must be positive")
    if t.clip_norm is not None and not t.clip_norm > 0:
        raise ConfigError("train.clip_norm must be positive or 'none'")
    if any(not w > 0 for w in t.task_weights):
        raise ConfigError("loss.lambda_* must be positive")
    if not 0 < t.p_clamp < 0.5 or not 0 < t.ratio_clamp < 0.5:
        raise ConfigError("loss clamp epsilons must lie in (0, 0.5)")
    if any(e < 0 for e in run.epochs.values()):
        raise ConfigError("stage epochs must be >= 0")
    if run.pretrain_samples < 1:
        raise ConfigError("train.pretrain_samples must be >= 1")
    if run.mode == "LSD" and run.model.tasks != ("EXPR",):
        raise ConfigError("LSD mode trains the expression task only")


def env_seed(default: int | None = None) -> int | None:
    raw = os.environ.get(SEED_ENV)
    if raw is None or raw.strip() == "":
        return default
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"{SEED_ENV} must be an integer, got {raw!r}") from None


def load(path: str | os.PathLike | None = None, overrides: Mapping[str, str] | None = None) -> RunConfig:
    """Read ``path`` (optional), apply ``overrides``, fall back to the seed env var."""
    items: dict[str, str] = {}
    if path is not None:
        items.update(parse_text(Path(path).read_text(encoding="utf-8"), str(path)))
    items.update(overrides or {})
    if "train.seed" not in items:
        seed = env_seed()
        if seed is not None:
            items["train.seed"] = str(seed)
    return parse_items(items)


def with_seed(run: RunConfig, seed: int) -> RunConfig:
    return replace(run, seed=seed)
