"""CNN backbone + two-layer spatial transformer with three task heads."""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
import numpy as np

from .autodiff import Tensor, concat, sigmoid
from .nn import BasicBlock, BatchNorm2d, Conv2d, EncoderLayer, Linear, Module, upsample_nearest

TASKS = ("VA", "EXPR", "AU")
BACKBONES = ("resnet_lite", "hrnet_lite")
MTL_EXPR_CLASSES = 8
LSD_EXPR_CLASSES = 6


@dataclass(frozen=True)
class ModelConfig:
    backbone: str = "resnet_lite"
    input_size: int = 64
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 128
    n_encoder_layers: int = 2
    n_expr_classes: int = MTL_EXPR_CLASSES
    n_aus: int = 12
    tasks: tuple[str, ...] = TASKS

    def __post_init__(self) -> None:
        unknown = sorted(set(self.tasks) - set(TASKS))
        if unknown:
            raise ValueError(f"unknown task(s) {unknown}; expected a subset of {TASKS}")
        object.__setattr__(self, "tasks", tuple(t for t in TASKS if t in set(self.tasks)))
        self.validate()

    def validate(self) -> None:
        if self.backbone not in BACKBONES:
            raise ValueError(f"unknown backbone {self.backbone!r}; expected one of {BACKBONES}")
        if self.n_encoder_layers != 2:
            raise ValueError("the spatial transformer has exactly 2 encoder layers")
        if self.d_model <= 0 or self.n_heads <= 0 or self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} must be a positive multiple of n_heads={self.n_heads}")
        if self.d_ff <= 0 or self.n_expr_classes < 2 or self.n_aus < 1:
            raise ValueError("d_ff, n_expr_classes and n_aus must be positive (n_expr_classes >= 2)")
        if self.input_size < 8 or self.input_size % 8:
            raise ValueError(f"input_size={self.input_size} must be a positive multiple of 8")
        if not self.tasks:
            raise ValueError("at least one task is required")

    @classmethod
    def for_mode(cls, mode: str, **overrides) -> "ModelConfig":
        if mode == "MTL":
            base = cls(n_expr_classes=MTL_EXPR_CLASSES, tasks=TASKS)
        elif mode == "LSD":
            base = cls(n_expr_classes=LSD_EXPR_CLASSES, tasks=("EXPR",))
        else:
            raise ValueError(f"unknown mode {mode!r}")
        return replace(base, **overrides)

    def to_items(self) -> dict[str, str]:
        return {
            "model.backbone": self.backbone,
            "model.input_size": str(self.input_size),
            "model.d_model": str(self.d_model),
            "model.n_heads": str(self.n_heads),
            "model.d_ff": str(self.d_ff),
            "model.n_encoder_layers": str(self.n_encoder_layers),
            "model.n_expr_classes": str(self.n_expr_classes),
            "model.n_aus": str(self.n_aus),
            "model.tasks": ",".join(self.tasks),
        }

    @classmethod
    def from_items(cls, items: dict[str, str]) -> "ModelConfig":
        kwargs = {}
        for f in fields(cls):
            key = f"model.{f.name}"
            if key not in items:
                continue
            raw = items[key]
            if f.name == "backbone":
                kwargs[f.name] = raw
            elif f.name == "tasks":
                kwargs[f.name] = tuple(t for t in raw.split(",") if t)
            else:
                kwargs[f.name] = int(raw)
        return cls(**kwargs)

    @property
    def n_tokens(self) -> int:
        return (self.input_size // 8) ** 2


# ----------------------------------------------------------------- backbones


class ResNetLite(Module):
    """3x3 stride-2 stem, then 3 stages of 2 basic blocks at (16, 32, 64) channels."""

    out_channels = 64

    def __init__(self, rng: np.random.Generator) -> None:
        self.stem_conv = Conv2d(3, 16, 3, 2, rng=rng)
        self.stem_bn = BatchNorm2d(16)
        plan = [(16, 16, 1), (16, 16, 1), (16, 32, 2), (32, 32, 1), (32, 64, 2), (64, 64, 1)]
        self.blocks = [BasicBlock(i, o, s, rng=rng) for i, o, s in plan]

    def forward(self, x: Tensor) -> Tensor:
        x = self.stem_bn(self.stem_conv(x)).relu()
        for block in self.blocks:
            x = block(x)
        return x


class FusionStage(Module):
    """One basic block per stream followed by two-way cross-resolution fusion."""

    def __init__(self, c_high: int, c_low: int, rng: np.random.Generator) -> None:
        self.high_block = BasicBlock(c_high, c_high, 1, rng=rng)
        self.low_block = BasicBlock(c_low, c_low, 1, rng=rng)
        self.low_to_high_conv = Conv2d(c_low, c_high, 1, rng=rng)
        self.low_to_high_bn = BatchNorm2d(c_high)
        self.high_to_low_conv = Conv2d(c_high, c_low, 3, 2, rng=rng)
        self.high_to_low_bn = BatchNorm2d(c_low)

    def forward(self, high: Tensor, low: Tensor) -> tuple[Tensor, Tensor]:
        high = self.high_block(high)
        low = self.low_block(low)
        up = upsample_nearest(self.low_to_high_bn(self.low_to_high_conv(low)), 2)
        down = self.high_to_low_bn(self.high_to_low_conv(high))
        return (high + up).relu(), (low + down).relu()


class HRNetLite(Module):
    """Parallel 1/4 and 1/8 resolution streams, fused to one 1/8 map."""

    out_channels = 64

    def __init__(self, rng: np.random.Generator, c_high: int = 16, c_low: int = 32) -> None:
        self.stem1_conv = Conv2d(3, c_high, 3, 2, rng=rng)
        self.stem1_bn = BatchNorm2d(c_high)
        self.stem2_conv = Conv2d(c_high, c_high, 3, 2, rng=rng)
        self.stem2_bn = BatchNorm2d(c_high)
        self.branch_conv = Conv2d(c_high, c_low, 3, 2, rng=rng)
        self.branch_bn = BatchNorm2d(c_low)
        self.stages = [FusionStage(c_high, c_low, rng), FusionStage(c_high, c_low, rng)]
        self.final_down_conv = Conv2d(c_high, c_low, 3, 2, rng=rng)
        self.final_down_bn = BatchNorm2d(c_low)
        self.fuse_conv = Conv2d(2 * c_low, self.out_channels, 1, rng=rng)
        self.fuse_bn = BatchNorm2d(self.out_channels)

    def forward(self, x: Tensor) -> Tensor:
        x = self.stem1_bn(self.stem1_conv(x)).relu()
        high = self.stem2_bn(self.stem2_conv(x)).relu()
        low = self.branch_bn(self.branch_conv(high)).relu()
        for stage in self.stages:
            high, low = stage(high, low)
        down = self.final_down_bn(self.final_down_conv(high)).relu()
        fused = concat([down, low], axis=1)
        return self.fuse_bn(self.fuse_conv(fused)).relu()


def build_backbone(name: str, rng: np.random.Generator) -> Module:
    if name == "resnet_lite":
        return ResNetLite(rng)
    if name == "hrnet_lite":
        return HRNetLite(rng)
    raise ValueError(f"unknown backbone {name!r}")


# -------------------------------------------------------------------- model


class HybridModel(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0) -> None:
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        self.backbone = build_backbone(cfg.backbone, rng)
        c = self.backbone.out_channels
        self.token_proj = Conv2d(c, cfg.d_model, 1, rng=rng) if c != cfg.d_model else None
        self.pos_embedding = Tensor(rng.normal(0.0, 0.02, size=(cfg.n_tokens, cfg.d_model)), requires_grad=True)
        self.encoders = [EncoderLayer(cfg.d_model, cfg.n_heads, cfg.d_ff, rng=rng)
                         for _ in range(cfg.n_encoder_layers)]
        self.head_va = Linear(cfg.d_model, 2, rng=rng) if "VA" in cfg.tasks else None
        self.head_expr = Linear(cfg.d_model, cfg.n_expr_classes, rng=rng) if "EXPR" in cfg.tasks else None
        self.head_au = Linear(cfg.d_model, cfg.n_aus, rng=rng) if "AU" in cfg.tasks else None

    def features(self, images: Tensor) -> Tensor:
        """Backbone map as tokens [B, T, d_model], before positional embedding."""
        s = self.cfg.input_size
        if images.ndim != 4 or images.shape[1:] != (3, s, s):
            raise ValueError(f"expected images of shape [B,3,{s},{s}], got {images.shape}")
        fmap = self.backbone(images)
        if self.token_proj is not None:
            fmap = self.token_proj(fmap)
        B, d, h, w = fmap.shape
        return fmap.reshape(B, d, h * w).transpose(0, 2, 1)

    def from_tokens(self, tokens: Tensor) -> dict[str, Tensor]:
        x = tokens + self.pos_embedding
        for layer in self.encoders:
            x = layer(x)
        pooled = x.mean(axis=1)
        out: dict[str, Tensor] = {}
        if self.head_va is not None:
            out["va_raw"] = self.head_va(pooled)
            out["va"] = out["va_raw"].tanh()
        if self.head_expr is not None:
            out["expr_logits"] = self.head_expr(pooled)
        if self.head_au is not None:
            out["au_logits"] = self.head_au(pooled)
        return out

    def forward(self, images: Tensor) -> dict[str, Tensor]:
        return self.from_tokens(self.features(images))


def build_model(cfg: ModelConfig, seed: int = 0) -> HybridModel:
    return HybridModel(cfg, seed)


def forward(model: HybridModel, images) -> dict[str, Tensor]:
    return model(images if isinstance(images, Tensor) else Tensor(images))


# -------------------------------------------------------------- predictions


@dataclass
class Prediction:
    """Probabilistic outputs for one sample; absent tasks are None."""

    valence: float | None = None
    arousal: float | None = None
    expr_probs: np.ndarray | None = None
    au_probs: np.ndarray | None = None


@dataclass
class PredictionSet:
    """Stacked predictions: va [N,2], expr_probs [N,C], au_probs [N,A]."""

    va: np.ndarray | None = None
    expr_probs: np.ndarray | None = None
    au_probs: np.ndarray | None = None
    n: int = field(default=0)

    def __len__(self) -> int:
        return self.n

    def items(self) -> list[Prediction]:
        out = []
        for i in range(self.n):
            out.append(Prediction(
                valence=None if self.va is None else float(self.va[i, 0]),
                arousal=None if self.va is None else float(self.va[i, 1]),
                expr_probs=None if self.expr_probs is None else self.expr_probs[i],
                au_probs=None if self.au_probs is None else self.au_probs[i],
            ))
        return out


def _softmax_rows(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def predict_set(model: HybridModel, images: np.ndarray, batch_size: int = 64) -> PredictionSet:
    """Eval-mode inference over ``images`` [N,3,H,W] in chunks."""
    was_training = model.training
    model.eval()
    va, expr, au = [], [], []
    try:
        for start in range(0, len(images), batch_size):
            out = model(Tensor(images[start : start + batch_size]))
            if "va" in out:
                va.append(out["va"].data)
            if "expr_logits" in out:
                expr.append(_softmax_rows(out["expr_logits"].data))
            if "au_logits" in out:
                au.append(sigmoid(out["au_logits"]).data)
    finally:
        model.train(was_training)
    return PredictionSet(
        va=np.concatenate(va) if va else None,
        expr_probs=np.concatenate(expr) if expr else None,
        au_probs=np.concatenate(au) if au else None,
        n=len(images),
    )


def predict(model: HybridModel, images: np.ndarray, batch_size: int = 64) -> list[Prediction]:
    return predict_set(model, images, batch_size).items()


def _check_compatible(a, b) -> None:
    for f in fields(a):
        x, y = getattr(a, f.name), getattr(b, f.name)
        if (x is None) != (y is None):
            raise ValueError(f"ensemble: {f.name} present in only one member")
        if isinstance(x, np.ndarray) and x.shape != y.shape:
            raise ValueError(f"ensemble: {f.name} shapes differ, {x.shape} vs {y.shape}")


def ensemble(a, b):
    """Arithmetic mean of two members' probabilities and VA outputs.

    Works on a pair of :class:`Prediction` or a pair of :class:`PredictionSet`.
    """
    if type(a) is not type(b):
        raise ValueError("ensemble members must be of the same type")
    if isinstance(a, PredictionSet) and a.n != b.n:
        raise ValueError(f"ensemble: {a.n} vs {b.n} predictions")
    _check_compatible(a, b)
    merged = {}
    for f in fields(a):
        x, y = getattr(a, f.name), getattr(b, f.name)
        if f.name == "n":
            merged["n"] = x
        elif x is None:
            merged[f.name] = None
        elif isinstance(x, np.ndarray):
            merged[f.name] = (x + y) / 2.0
        else:
            merged[f.name] = (x + y) / 2.0
    return type(a)(**merged)

