"""Adam, staged training, backbone pretraining and checkpoint round trips."""

from __future__ import annotations

import csv
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import checkpoint
from .autodiff import Tape, Tensor
from .data import Batch, Sample, batch_iter, expression_from_latent, stack_images, stack_labels
from .losses import (
    AuClassWeights,
    LossBundle,
    MetricsReport,
    P_CLAMP,
    RATIO_CLAMP,
    ccc_loss,
    combined_loss,
    compute_au_weights,
    cross_entropy,
    evaluate,
    weighted_bce,
)
from .model import HybridModel, ModelConfig, predict_set
from .nn import Linear, Module

log = logging.getLogger(__name__)

STAGES = ("pretrain_backbone", "frozen_backbone", "joint")
BACKBONE_PREFIX = "backbone."
LOG_FIELDS = ("epoch", "stage", "train_loss", "ccc_v", "ccc_a", "f1_expr", "f1_au", "mtl_score")


class InvalidStateError(RuntimeError):
    """Optimizer called without gradients for a trainable parameter."""


class NonFiniteLossError(RuntimeError):
    def __init__(self, epoch: int, batch_index: int, value: float) -> None:
        self.epoch, self.batch_index, self.value = epoch, batch_index, value
        super().__init__(f"non-finite loss {value} at epoch {epoch}, batch {batch_index}")


# --------------------------------------------------------------------- Adam


@dataclass
class AdamState:
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], state: AdamState, frozen: frozenset[str] | set[str] = frozenset()) -> None:
    """One bias-corrected Adam update, in place, skipping ``frozen`` names."""
    trainable = [name for name in params if name not in frozen]
    missing = [name for name in trainable if params[name].grad is None]
    if missing:
        raise InvalidStateError(f"no gradient for trainable parameter(s): {', '.join(missing[:5])}")
    state.t += 1
    bc1 = 1.0 - state.beta1**state.t
    bc2 = 1.0 - state.beta2**state.t
    for name in trainable:
        p = params[name]
        g = p.grad
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m = state.m[name] = state.beta1 * state.m[name] + (1.0 - state.beta1) * g
        v = state.v[name] = state.beta2 * state.v[name] + (1.0 - state.beta2) * (g * g)
        p.data -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


def clip_grad_norm(params: Sequence[Tensor], max_norm: float) -> float:
    grads = [p.grad for p in params if p.grad is not None]
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if norm > max_norm:
        scale = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm


# ----------------------------------------------------------------- staging


@dataclass(frozen=True)
class StagePlan:
    stage: str
    epochs: int
    frozen_prefixes: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if self.stage not in STAGES:
            raise ValueError(f"unknown stage {self.stage!r}")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if bool(self.frozen_prefixes) != (self.stage == "frozen_backbone"):
            raise ValueError("only the frozen_backbone stage freezes parameters, and it must freeze some")

    @classmethod
    def default(cls, stage: str, epochs: int) -> "StagePlan":
        return cls(stage, epochs, (BACKBONE_PREFIX,) if stage == "frozen_backbone" else ())


@dataclass
class TrainConfig:
    lr: float = 5e-4
    batch_size: int = 64
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float | None = 5.0
    task_weights: tuple[float, float, float] = (1.0, 1.0, 1.0)
    augment: bool = False
    mode: str = "MTL"
    p_clamp: float = P_CLAMP
    ratio_clamp: float = RATIO_CLAMP

    def new_optimizer(self) -> AdamState:
        return AdamState(lr=self.lr, beta1=self.beta1, beta2=self.beta2, eps=self.eps)


@dataclass
class TrainState:
    """Everything needed to resume a stage mid-way."""

    stage: str
    epoch: int = 0
    global_step: int = 0
    optimizer: AdamState = field(default_factory=AdamState)


@dataclass
class EpochRecord:
    epoch: int
    stage: str
    train_loss: float
    metrics: MetricsReport | None = None

    def csv_row(self) -> dict[str, str]:
        m = self.metrics or MetricsReport()

        def fmt(x):
            return "" if x is None else repr(float(x))

        return {
            "epoch": str(self.epoch), "stage": self.stage, "train_loss": fmt(self.train_loss),
            "ccc_v": fmt(m.ccc_v), "ccc_a": fmt(m.ccc_a), "f1_expr": fmt(m.f1_expr_macro),
            "f1_au": fmt(m.f1_au_macro), "mtl_score": fmt(m.mtl_score),
        }


@dataclass
class StageReport:
    stage: str
    epochs: list[EpochRecord] = field(default_factory=list)

    @property
    def losses(self) -> list[float]:
        return [e.train_loss for e in self.epochs]


def append_log(path: str | os.PathLike, records: Sequence[EpochRecord]) -> None:
    path = Path(path)
    new = not path.exists() or path.stat().st_size == 0
    with open(path, "a", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOG_FIELDS, lineterminator="\n")
        if new:
            writer.writeheader()
        for r in records:
            writer.writerow(r.csv_row())


def batch_loss(model: HybridModel, batch: Batch, cfg: TrainConfig,
               au_weights: AuClassWeights | None) -> LossBundle:
    out = model(Tensor(batch.images))
    losses: dict[str, Tensor | None] = {}
    if "expr_logits" in out:
        losses["EXPR"] = cross_entropy(out["expr_logits"], batch.expr)
    if "au_logits" in out:
        losses["AU"] = weighted_bce(out["au_logits"], batch.aus, au_weights, cfg.p_clamp)
    if "va" in out:
        va = out["va"]
        losses["VA"] = ccc_loss(va[:, 0], va[:, 1], batch.va[:, 0], batch.va[:, 1])
    return combined_loss(losses, cfg.task_weights)


def evaluate_model(model: HybridModel, samples: Sequence[Sample], mode: str, batch_size: int = 64) -> MetricsReport:
    preds = predict_set(model, stack_images(samples), batch_size)
    va, expr, aus = stack_labels(samples)
    return evaluate(preds, va, expr, aus, model.cfg.n_expr_classes, mode)


def _au_weights_for(model: HybridModel, samples: Sequence[Sample], cfg: TrainConfig) -> AuClassWeights | None:
    if "AU" not in model.cfg.tasks:
        return None
    return compute_au_weights(stack_labels(samples)[2], cfg.ratio_clamp)


class _Frozen:
    """Disable gradients and batch-stat updates under the given prefixes."""

    def __init__(self, model: HybridModel, prefixes: Sequence[str]) -> None:
        self.model = model
        self.prefixes = tuple(prefixes)
        self.saved: list[tuple[Tensor, bool]] = []

    def names(self) -> set[str]:
        return {n for n, _ in self.model.named_parameters() if n.startswith(self.prefixes)}

    def __enter__(self) -> set[str]:
        names = self.names()
        for n, p in self.model.named_parameters():
            if n in names:
                self.saved.append((p, p.requires_grad))
                p.requires_grad = False
        if BACKBONE_PREFIX in self.prefixes:
            self.model.backbone.eval()
        return names

    def __exit__(self, *exc) -> None:
        for p, flag in self.saved:
            p.requires_grad = flag
        self.saved.clear()


def run_stage(model: HybridModel, plan: StagePlan, train: Sequence[Sample], val: Sequence[Sample] | None = None,
              cfg: TrainConfig | None = None, seed: int = 0, state: TrainState | None = None,
              log_path: str | os.PathLike | None = None, on_epoch_end=None) -> StageReport:
    """Train ``model`` for the epochs of ``plan`` not yet covered by ``state``.

    Batch order and augmentation depend only on ``(seed, epoch)``, so a run
    resumed from a saved :class:`TrainState` continues exactly where the
    uninterrupted run would have been.
    """
    if not train:
        raise ValueError("training set is empty")
    cfg = cfg or TrainConfig()
    if state is None or state.stage != plan.stage:
        step = state.global_step if state is not None else 0
        state = TrainState(plan.stage, 0, step, cfg.new_optimizer())
    report = StageReport(plan.stage)
    if state.epoch >= plan.epochs:
        return report

    au_weights = _au_weights_for(model, train, cfg)
    params = dict(model.named_parameters())
    model.train()
    with _Frozen(model, plan.frozen_prefixes) as frozen:
        trainable = [p for n, p in params.items() if n not in frozen]
        while state.epoch < plan.epochs:
            epoch = state.epoch
            total, count = 0.0, 0
            for b, batch in enumerate(batch_iter(train, cfg.batch_size, seed, cfg.augment, epoch)):
                for p in trainable:
                    p.grad = np.zeros_like(p.data)
                with Tape() as tape:
                    bundle = batch_loss(model, batch, cfg, au_weights)
                value = bundle.value
                if not math.isfinite(value):
                    raise NonFiniteLossError(epoch, b, value)
                tape.backward(bundle.total)
                del tape
                if cfg.clip_norm is not None:
                    clip_grad_norm(trainable, cfg.clip_norm)
                adam_step(params, state.optimizer, frozen)
                state.global_step += 1
                total += value * len(batch)
                count += len(batch)
            state.epoch += 1
            metrics = evaluate_model(model, val, cfg.mode, cfg.batch_size) if val else None
            if val and plan.frozen_prefixes:
                model.backbone.eval()
            record = EpochRecord(state.epoch, plan.stage, total / count, metrics)
            report.epochs.append(record)
            log.info("%s epoch %d loss %.6f", plan.stage, state.epoch, record.train_loss)
            if log_path is not None:
                append_log(log_path, [record])
            if on_epoch_end is not None:
                on_epoch_end(state, record)
    model.train()
    return report


# ---------------------------------------------------------------- pretrain


def _pool(fmap: Tensor) -> Tensor:
    return fmap.mean(axis=(2, 3))


def pretrain_backbone(model: HybridModel, samples: Sequence[Sample], epochs: int, seed: int = 0,
                      cfg: TrainConfig | None = None, state: TrainState | None = None,
                      log_path: str | os.PathLike | None = None) -> StageReport:
    """Substitute pretraining on synthetic data; the temporary head is discarded.

    resnet_lite learns 6-way expression classification; hrnet_lite learns to
    regress the four face-geometry values (a landmark-style target).  When
    ``state`` is given its step counter advances and it ends marked as a
    finished pretrain stage.  The stage is not resumable mid-way because
    the head is not saved.
    """
    if not samples:
        raise ValueError("pretraining set is empty")
    if any(s.latent is None for s in samples):
        raise ValueError("pretraining samples need generator latents")
    cfg = cfg or TrainConfig()
    backbone = model.backbone
    rng = np.random.default_rng([seed, 7])
    classify = model.cfg.backbone == "resnet_lite"
    head = Linear(backbone.out_channels, 6 if classify else 4, rng=rng)
    if classify:
        targets = np.array([expression_from_latent(s.latent, "LSD") for s in samples])
    else:
        targets = np.stack([s.latent.geometry() for s in samples])
    params = {f"backbone.{n}": p for n, p in backbone.named_parameters()}
    params.update({f"head.{n}": p for n, p in head.named_parameters()})
    opt = cfg.new_optimizer()
    report = StageReport("pretrain_backbone")
    backbone.train()
    for epoch in range(epochs):
        total, count = 0.0, 0
        for b, batch in enumerate(batch_iter(samples, cfg.batch_size, seed, cfg.augment, epoch)):
            for p in params.values():
                p.grad = np.zeros_like(p.data)
            with Tape() as tape:
                z = head(_pool(backbone(Tensor(batch.images))))
                if classify:
                    loss = cross_entropy(z, targets[batch.indices])
                else:
                    diff = z - targets[batch.indices]
                    loss = (diff * diff).mean()
            value = loss.item()
            if not math.isfinite(value):
                raise NonFiniteLossError(epoch, b, value)
            tape.backward(loss)
            del tape
            if cfg.clip_norm is not None:
                clip_grad_norm(list(params.values()), cfg.clip_norm)
            adam_step(params, opt)
            if state is not None:
                state.global_step += 1
            total += value * len(batch)
            count += len(batch)
        record = EpochRecord(epoch + 1, "pretrain_backbone", total / count)
        report.epochs.append(record)
        log.info("pretrain_backbone epoch %d loss %.6f", epoch + 1, record.train_loss)
        if log_path is not None:
            append_log(log_path, [record])
    if state is not None:
        state.stage, state.epoch = "pretrain_backbone", epochs
        state.optimizer = cfg.new_optimizer()
    return report


# -------------------------------------------------------------- checkpoints


def _state_items(state: TrainState | None) -> dict[str, str]:
    if state is None:
        return {}
    opt = state.optimizer
    return {
        "train.stage": state.stage, "train.epoch": str(state.epoch), "train.global_step": str(state.global_step),
        "optim.t": str(opt.t), "optim.lr": repr(opt.lr), "optim.beta1": repr(opt.beta1),
        "optim.beta2": repr(opt.beta2), "optim.eps": repr(opt.eps),
    }


def save_checkpoint(model: HybridModel, state: TrainState | None, path: str | os.PathLike,
                    extra: dict[str, str] | None = None) -> None:
    config = model.cfg.to_items()
    config.update(_state_items(state))
    config.update(extra or {})
    tensors = {f"model.{n}": t.data for n, t in model.named_tensors().items()}
    if state is not None:
        for n, arr in state.optimizer.m.items():
            tensors[f"optim.m.{n}"] = arr
        for n, arr in state.optimizer.v.items():
            tensors[f"optim.v.{n}"] = arr
    checkpoint.write(path, config, tensors)


def _parse_state(config: dict[str, str], tensors: dict[str, np.ndarray]) -> TrainState | None:
    if "train.stage" not in config:
        return None
    try:
        opt = AdamState(lr=float(config["optim.lr"]), beta1=float(config["optim.beta1"]),
                        beta2=float(config["optim.beta2"]), eps=float(config["optim.eps"]),
                        t=int(config["optim.t"]))
        state = TrainState(config["train.stage"], int(config["train.epoch"]),
                           int(config["train.global_step"]), opt)
    except (KeyError, ValueError) as exc:
        raise checkpoint.CheckpointError(f"incomplete training state: {exc}") from None
    for name, arr in tensors.items():
        if name.startswith("optim.m."):
            opt.m[name[len("optim.m."):]] = arr.copy()
        elif name.startswith("optim.v."):
            opt.v[name[len("optim.v."):]] = arr.copy()
    return state


def load_into(model: Module, tensors: dict[str, np.ndarray]) -> None:
    """Copy ``model.<name>`` tensors into ``model`` after validating all of them."""
    own = model.named_tensors()
    incoming = {k[len("model."):]: v for k, v in tensors.items() if k.startswith("model.")}
    unknown = sorted(set(incoming) - set(own))
    if unknown:
        raise checkpoint.CheckpointError(f"unknown tensor name(s): {', '.join(unknown[:5])}")
    missing = sorted(set(own) - set(incoming))
    if missing:
        raise checkpoint.CheckpointError(f"checkpoint lacks tensor(s): {', '.join(missing[:5])}")
    for name, arr in incoming.items():
        if own[name].shape != arr.shape:
            raise checkpoint.CheckpointError(f"{name}: shape {arr.shape}, model expects {own[name].shape}")
    for name, arr in incoming.items():
        own[name].data[...] = arr


def load_checkpoint(path: str | os.PathLike) -> tuple[HybridModel, TrainState | None, dict[str, str]]:
    """Rebuild the model, optimizer state and raw config from ``path``."""
    config, tensors = checkpoint.read(path)
    stray = [k for k in tensors if not k.startswith(("model.", "optim.m.", "optim.v."))]
    if stray:
        raise checkpoint.CheckpointError(f"unknown tensor name(s): {', '.join(stray[:5])}")
    try:
        cfg = ModelConfig.from_items(config)
    except ValueError as exc:
        raise checkpoint.CheckpointError(f"invalid model config: {exc}") from None
    model = HybridModel(cfg, seed=0)
    load_into(model, tensors)
    state = _parse_state(config, tensors)
    if state is not None:
        names = {n for n, _ in model.named_parameters()}
        bad = sorted((set(state.optimizer.m) | set(state.optimizer.v)) - names)
        if bad:
            raise checkpoint.CheckpointError(f"optimizer state for unknown tensor(s): {', '.join(bad[:5])}")
    return model, state, config
