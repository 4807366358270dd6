"""Task losses (cross-entropy, weighted BCE, CCC) and evaluation metrics.

Invalid labels use the annotation sentinels: -5 for valence/arousal, -1 for
expression and AU entries.  A loss returns ``None`` when its task has too
few valid labels in the batch; :func:`combined_loss` treats that as masked.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .autodiff import Tensor, as_tensor, clamp, getitem, log, log_softmax, sigmoid

VA_INVALID = -5.0
EXPR_INVALID = -1
AU_INVALID = -1

P_CLAMP = 1e-7
RATIO_CLAMP = 1e-3
CCC_DEGENERATE = 1e-12


# -------------------------------------------------------------------- losses


def cross_entropy(logits: Tensor, targets) -> Tensor | None:
    """Mean ``-log softmax(logits)[target]`` over rows whose target is valid."""
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2 or targets.shape != (logits.shape[0],):
        raise ValueError(f"cross_entropy: logits {logits.shape} vs targets {targets.shape}")
    valid = targets != EXPR_INVALID
    if np.any(valid & ((targets < 0) | (targets >= logits.shape[1]))):
        raise ValueError("cross_entropy: target class out of range")
    rows = np.flatnonzero(valid)
    if rows.size == 0:
        return None
    logp = log_softmax(logits, axis=1)
    picked = getitem(logp, (rows, targets[rows]))
    return -picked.mean()


@dataclass(frozen=True)
class AuClassWeights:
    """Positive-term weights ``w = (1 - r) / r`` from positive ratios ``r``."""

    w: np.ndarray
    r: np.ndarray


def compute_au_weights(labels, ratio_clamp: float = RATIO_CLAMP) -> AuClassWeights:
    labels = np.asarray(labels)
    if labels.ndim != 2:
        raise ValueError("AU labels must be a [samples, n_aus] matrix")
    valid = labels != AU_INVALID
    n_valid = valid.sum(axis=0)
    empty = np.flatnonzero(n_valid == 0)
    if empty.size:
        raise ValueError(f"AU class {int(empty[0])} has no valid labels")
    positives = ((labels == 1) & valid).sum(axis=0)
    r = np.clip(positives / n_valid, ratio_clamp, 1.0 - ratio_clamp)
    return AuClassWeights(w=(1.0 - r) / r, r=r)


def weighted_bce(logits: Tensor, targets, weights: AuClassWeights | np.ndarray | None = None,
                 p_clamp: float = P_CLAMP) -> Tensor | None:
    """Weighted binary cross-entropy averaged over valid (sample, AU) entries.

    Only the positive term carries the class weight:
    ``-(w * t * log p + (1 - t) * log(1 - p))`` with ``p`` clamped away
    from 0 and 1.
    """
    t = np.asarray(targets, dtype=np.float64)
    if t.shape != logits.shape or logits.ndim != 2:
        raise ValueError(f"weighted_bce: logits {logits.shape} vs targets {t.shape}")
    if weights is None:
        w = np.ones(logits.shape[1])
    else:
        w = np.asarray(weights.w if isinstance(weights, AuClassWeights) else weights, dtype=np.float64)
    if w.shape != (logits.shape[1],) or not np.all(np.isfinite(w)):
        raise ValueError("weighted_bce: weights must be finite with one entry per AU")
    valid = (t != AU_INVALID).astype(np.float64)
    n_valid = valid.sum()
    if n_valid == 0:
        return None
    pos = np.where(t == 1, 1.0, 0.0) * valid
    neg = np.where(t == 0, 1.0, 0.0) * valid
    p = clamp(sigmoid(logits), p_clamp, 1.0 - p_clamp)
    terms = log(p) * (pos * w) + log(1.0 - p) * neg
    return -terms.sum() * (1.0 / n_valid)


def _ccc_tensor(x: Tensor, y: np.ndarray) -> Tensor:
    n = y.shape[0]
    mx = x.mean()
    my = float(y.mean())
    dx = x - mx
    dy = y - my
    cov = (dx * dy).sum() * (1.0 / n)
    vx = (dx * dx).sum() * (1.0 / n)
    vy = float((dy * dy).mean())
    denom = vx + vy + (mx - my) * (mx - my)
    if denom.item() < CCC_DEGENERATE:
        return Tensor(ccc(x.data, y))
    return cov * 2.0 / denom


def ccc_loss(pred_v: Tensor, pred_a: Tensor, true_v, true_a) -> Tensor | None:
    """``1 - (CCC_v + CCC_a) / 2`` over frames with valid labels.

    Frames whose label equals the -5 sentinel are dropped per dimension.
    Returns None when either dimension has fewer than two valid frames.
    """
    terms = []
    for pred, true in ((pred_v, true_v), (pred_a, true_a)):
        pred = as_tensor(pred)
        true = np.asarray(true, dtype=np.float64)
        if pred.shape != true.shape or pred.ndim != 1:
            raise ValueError(f"ccc_loss: prediction {pred.shape} vs target {true.shape}")
        keep = np.flatnonzero(true != VA_INVALID)
        if keep.size < 2:
            return None
        terms.append(_ccc_tensor(getitem(pred, keep), true[keep]))
    return 1.0 - (terms[0] + terms[1]) * 0.5


@dataclass
class LossBundle:
    l_expr: float
    l_au: float
    l_va: float
    total: Tensor
    task_weights: tuple[float, float, float] = (1.0, 1.0, 1.0)
    masked: frozenset[str] = field(default_factory=frozenset)

    @property
    def value(self) -> float:
        return self.total.item()


def combined_loss(losses: Mapping[str, Tensor | None],
                  weights: tuple[float, float, float] = (1.0, 1.0, 1.0)) -> LossBundle:
    """Weighted sum over the tasks ``EXPR``, ``AU``, ``VA`` (in that weight order).

    Tasks missing from ``losses`` or mapped to None contribute 0.
    """
    lam = dict(zip(("EXPR", "AU", "VA"), weights))
    if any(v <= 0 for v in lam.values()):
        raise ValueError("task weights must be positive")
    unknown = set(losses) - set(lam)
    if unknown:
        raise ValueError(f"unknown tasks {sorted(unknown)}")
    active = {k: v for k, v in losses.items() if v is not None}
    if not active:
        raise ValueError("all tasks are masked")
    total = None
    for task in ("EXPR", "AU", "VA"):
        if task in active:
            term = active[task] * lam[task]
            total = term if total is None else total + term
    values = {k: (active[k].item() if k in active else 0.0) for k in lam}
    return LossBundle(
        l_expr=values["EXPR"], l_au=values["AU"], l_va=values["VA"], total=total,
        task_weights=tuple(weights), masked=frozenset(k for k in lam if k not in active),
    )


# ------------------------------------------------------------------- metrics


def ccc(x, y) -> float:
    """Concordance correlation coefficient with population moments."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError(f"ccc: shapes {x.shape} and {y.shape} differ or are not 1-D")
    if x.size < 2:
        raise ValueError("ccc needs at least 2 values")
    mx, my = x.mean(), y.mean()
    dx, dy = x - mx, y - my
    denom = (dx * dx).mean() + (dy * dy).mean() + (mx - my) ** 2
    if denom < CCC_DEGENERATE:
        return 1.0 if np.all(np.abs(x - y) <= CCC_DEGENERATE) else 0.0
    return float(2.0 * (dx * dy).mean() / denom)


def va_score(ccc_v: float, ccc_a: float) -> float:
    """Mean concordance of the two affect dimensions (higher is better)."""
    return 0.5 * (ccc_v + ccc_a)


def f1_binary(preds, targets) -> float:
    preds = np.asarray(preds).astype(bool)
    targets = np.asarray(targets).astype(bool)
    if preds.shape != targets.shape:
        raise ValueError(f"f1_binary: lengths {preds.shape} and {targets.shape} differ")
    tp = int(np.sum(preds & targets))
    fp = int(np.sum(preds & ~targets))
    fn = int(np.sum(~preds & targets))
    denom = 2 * tp + fp + fn
    return 0.0 if denom == 0 else 2 * tp / denom


def f1_macro(per_class) -> float:
    per_class = list(per_class)
    if not per_class:
        raise ValueError("f1_macro needs at least one class")
    return float(math.fsum(per_class) / len(per_class))


def expr_f1_macro(pred_ids, true_ids, n_classes: int) -> float:
    """Macro F1 over all ``n_classes`` one-vs-rest problems, valid rows only."""
    pred_ids = np.asarray(pred_ids)
    true_ids = np.asarray(true_ids)
    if pred_ids.shape != true_ids.shape:
        raise ValueError("expr_f1_macro: length mismatch")
    keep = true_ids != EXPR_INVALID
    p, t = pred_ids[keep], true_ids[keep]
    return f1_macro(f1_binary(p == c, t == c) for c in range(n_classes))


def au_f1_macro(pred_bits, true_bits) -> float:
    """Macro F1 over AU columns; invalid entries are excluded per column."""
    pred_bits = np.asarray(pred_bits)
    true_bits = np.asarray(true_bits)
    if pred_bits.shape != true_bits.shape or pred_bits.ndim != 2:
        raise ValueError("au_f1_macro: shapes differ or are not 2-D")
    scores = []
    for j in range(true_bits.shape[1]):
        keep = true_bits[:, j] != AU_INVALID
        scores.append(f1_binary(pred_bits[keep, j] == 1, true_bits[keep, j] == 1))
    return f1_macro(scores)


def mtl_score(ccc_v: float | None, ccc_a: float | None, f1_expr: float | None, f1_au: float | None) -> float:
    if None in (ccc_v, ccc_a, f1_expr, f1_au):
        raise ValueError("mtl_score needs CCC for both dimensions and both F1 scores")
    return (ccc_v + ccc_a) / 2.0 + f1_expr + f1_au


@dataclass
class MetricsReport:
    """Evaluation summary; entries are None for tasks that were not evaluated."""

    ccc_v: float | None = None
    ccc_a: float | None = None
    f1_expr_macro: float | None = None
    f1_au_macro: float | None = None
    mtl_score: float | None = None
    lsd_f1: float | None = None

    KEYS = ("ccc_v", "ccc_a", "f1_expr_macro", "f1_au_macro", "mtl_score", "lsd_f1")

    def to_text(self) -> str:
        lines = []
        for k in self.KEYS:
            v = getattr(self, k)
            lines.append(f"{k}={'' if v is None else repr(float(v))}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "MetricsReport":
        values = {}
        for line in text.splitlines():
            if not line.strip():
                continue
            key, sep, raw = line.partition("=")
            if not sep or key not in cls.KEYS:
                raise ValueError(f"bad metrics line {line!r}")
            values[key] = float(raw) if raw else None
        return cls(**values)

    def table(self) -> str:
        width = max(len(k) for k in self.KEYS)
        rows = [f"{'metric':<{width}}  value", f"{'-' * width}  ------"]
        for k in self.KEYS:
            v = getattr(self, k)
            rows.append(f"{k:<{width}}  {'-' if v is None else f'{v:.4f}'}")
        return "\n".join(rows)


def evaluate(preds, va=None, expr=None, aus=None, n_expr_classes: int | None = None,
             mode: str = "MTL") -> MetricsReport:
    """Score a :class:`~affect_forge.model.PredictionSet` against label arrays.

    ``va`` is [N,2] with -5 sentinels, ``expr`` [N] with -1, ``aus`` [N,A]
    with -1.  In LSD mode only the expression F1 is reported (as ``lsd_f1``
    and ``f1_expr_macro``).
    """
    report = MetricsReport()
    if preds.expr_probs is not None and expr is not None:
        c = n_expr_classes or preds.expr_probs.shape[1]
        report.f1_expr_macro = expr_f1_macro(preds.expr_probs.argmax(axis=1), expr, c)
        if mode == "LSD":
            report.lsd_f1 = report.f1_expr_macro
    if mode == "LSD":
        return report
    if preds.va is not None and va is not None:
        va = np.asarray(va, dtype=np.float64)
        vals = []
        for d in range(2):
            keep = va[:, d] != VA_INVALID
            vals.append(ccc(preds.va[keep, d], va[keep, d]) if keep.sum() >= 2 else None)
        report.ccc_v, report.ccc_a = vals
    if preds.au_probs is not None and aus is not None:
        report.f1_au_macro = au_f1_macro((preds.au_probs >= 0.5).astype(int), aus)
    if None not in (report.ccc_v, report.ccc_a, report.f1_expr_macro, report.f1_au_macro):
        report.mtl_score = mtl_score(report.ccc_v, report.ccc_a, report.f1_expr_macro, report.f1_au_macro)
    return report
