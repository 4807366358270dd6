"""Finite-difference audit suites behind ``affect-forge gradcheck``.

Every check reduces an op's output to a scalar with a fixed random
projection, ``sum(op(x) * R)``, so all output coordinates contribute.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, gradcheck
from .losses import ccc_loss, combined_loss, compute_au_weights, cross_entropy, weighted_bce
from .model import ModelConfig, build_model
from .nn import BasicBlock, EncoderLayer, RunningStats, batchnorm2d, conv2d, layer_norm, multi_head_attention, \
    upsample_nearest

H = 1e-4
# Deep relu stacks put kinks within 1e-4 of some probes; a smaller step keeps
# the central difference on one linear piece.
MODEL_H = 1e-5
LINEAR_TOL = 1e-6
NONLINEAR_TOL = 1e-3
SCOPES = ("ops", "losses", "model")


@dataclass
class CheckResult:
    name: str
    error: float
    tol: float
    seconds: float = 0.0

    @property
    def ok(self) -> bool:
        return self.error <= self.tol


def _projected(op: Callable[..., Tensor], shape_out: tuple[int, ...], rng: np.random.Generator):
    r = rng.uniform(-1, 1, size=shape_out)
    return lambda *xs: (op(*xs) * r).sum()


def _run(name: str, f, xs, tol: float, indices=None, h: float = H) -> CheckResult:
    t0 = time.perf_counter()
    err = gradcheck(f, xs, h, indices)
    return CheckResult(name, err, tol, time.perf_counter() - t0)


def _u(rng, *shape, lo=-2.0, hi=2.0) -> Tensor:
    return Tensor(rng.uniform(lo, hi, size=shape))


def _away_from(rng, shape, points, margin, lo=-2.0, hi=2.0) -> Tensor:
    """Uniform samples kept at least ``margin`` from each kink in ``points``."""
    x = rng.uniform(lo, hi, size=shape)
    for p in points:
        near = np.abs(x - p) < margin
        x[near] = p + np.sign(x[near] - p + 1e-300) * margin * 2
    return Tensor(x)


def ops_suite(seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    out: list[CheckResult] = []
    a, b = _u(rng, 3, 4), _u(rng, 3, 4)
    col = _u(rng, 3, 1)
    out.append(_run("add", _projected(lambda x, y: x + y, (3, 4), rng), [a, b], LINEAR_TOL))
    out.append(_run("add (broadcast)", _projected(lambda x, y: x + y, (3, 4), rng), [a, col], LINEAR_TOL))
    out.append(_run("sub", _projected(lambda x, y: x - y, (3, 4), rng), [a, b], LINEAR_TOL))
    out.append(_run("neg", _projected(lambda x: -x, (3, 4), rng), [a], LINEAR_TOL))
    out.append(_run("mul", _projected(lambda x, y: x * y, (3, 4), rng), [a, b], NONLINEAR_TOL))
    out.append(_run("mul (broadcast)", _projected(lambda x, y: x * y, (3, 4), rng), [a, col], NONLINEAR_TOL))
    den = _u(rng, 3, 4, lo=0.5, hi=2.0)
    out.append(_run("div", _projected(lambda x, y: x / y, (3, 4), rng), [a, den], NONLINEAR_TOL))
    out.append(_run("relu", _projected(ad.relu, (3, 4), rng), [_away_from(rng, (3, 4), [0.0], 1e-2)],
                    NONLINEAR_TOL))
    out.append(_run("tanh", _projected(ad.tanh, (3, 4), rng), [a], NONLINEAR_TOL))
    out.append(_run("exp", _projected(ad.exp, (3, 4), rng), [a], NONLINEAR_TOL))
    out.append(_run("sigmoid", _projected(ad.sigmoid, (3, 4), rng), [a], NONLINEAR_TOL))
    pos = _u(rng, 3, 4, lo=0.2, hi=2.0)
    out.append(_run("log", _projected(ad.log, (3, 4), rng), [pos], NONLINEAR_TOL))
    out.append(_run("sqrt", _projected(ad.sqrt, (3, 4), rng), [pos], NONLINEAR_TOL))
    cl = _away_from(rng, (3, 4), [-1.0, 1.0], 1e-2)
    out.append(_run("clamp", _projected(lambda x: ad.clamp(x, -1.0, 1.0), (3, 4), rng), [cl], LINEAR_TOL))
    m1, m2 = _u(rng, 3, 4), _u(rng, 4, 2)
    out.append(_run("matmul", lambda x, y: (x @ y).sum(), [m1, m2], LINEAR_TOL))
    out.append(_run("matmul (projected)", _projected(lambda x, y: x @ y, (3, 2), rng), [m1, m2], LINEAR_TOL))
    t3 = _u(rng, 2, 3, 4)
    out.append(_run("sum axis=1", _projected(lambda x: x.sum(axis=1), (2, 4), rng), [t3], LINEAR_TOL))
    out.append(_run("mean axis=(0,2)", _projected(lambda x: x.mean(axis=(0, 2)), (3,), rng), [t3], LINEAR_TOL))
    out.append(_run("max axis=2", _projected(lambda x: x.max(axis=2), (2, 3), rng), [t3], LINEAR_TOL))
    out.append(_run("softmax", _projected(lambda x: ad.softmax(x, axis=-1), (2, 3, 4), rng), [t3], NONLINEAR_TOL))
    out.append(_run("log_softmax", _projected(lambda x: ad.log_softmax(x, axis=1), (2, 3, 4), rng), [t3],
                    NONLINEAR_TOL))
    out.append(_run("reshape/transpose", _projected(lambda x: x.reshape(4, 6).T, (6, 4), rng), [t3], LINEAR_TOL))
    out.append(_run("getitem", _projected(lambda x: x[:, [0, 2, 2]], (2, 3, 4), rng), [t3], LINEAR_TOL))
    out.append(_run("concat", _projected(lambda x, y: ad.concat([x, y], axis=1), (3, 8), rng), [a, b], LINEAR_TOL))
    out.append(_run("sum(x^2)", lambda x: (x * x).sum(), [a], 1e-8))
    w1, b1, w2, b2 = _u(rng, 4, 5, lo=-1, hi=1), _u(rng, 5), _u(rng, 5, 3, lo=-1, hi=1), _u(rng, 3)
    xin = _u(rng, 6, 4)
    out.append(_run("mlp (2 layers, every parameter)",
                    lambda p, q, r, s: ((ad.tanh(xin @ p + q) @ r + s) ** 2).mean(), [w1, b1, w2, b2], 1e-4))

    img, w, bias = _u(rng, 1, 2, 5, 5), _u(rng, 3, 2, 3, 3, lo=-1, hi=1), _u(rng, 3)
    out.append(_run("conv2d wrt input", _projected(lambda x: conv2d(x, w, bias, 1, 1), (1, 3, 5, 5), rng),
                    [img], LINEAR_TOL))
    out.append(_run("conv2d wrt weight+bias (stride 2)",
                    _projected(lambda ww, bb: conv2d(img, ww, bb, 2, 1), (1, 3, 3, 3), rng), [w, bias], LINEAR_TOL))
    out.append(_run("conv2d joint", _projected(lambda x, ww: conv2d(x, ww, None, 1, 0), (1, 3, 3, 3), rng),
                    [img, w], NONLINEAR_TOL))
    out.append(_run("upsample_nearest", _projected(lambda x: upsample_nearest(x, 2), (1, 2, 10, 10), rng), [img],
                    LINEAR_TOL))
    bx = _u(rng, 2, 3, 4, 4)
    scale, shift = _u(rng, 3, lo=0.5, hi=1.5), _u(rng, 3)
    stats = RunningStats.fresh(3)
    out.append(_run("batchnorm2d (train)",
                    _projected(lambda x, s, t: batchnorm2d(x, s, t, "train", stats), (2, 3, 4, 4), rng),
                    [bx, scale, shift], NONLINEAR_TOL))
    tok = _u(rng, 2, 3, 8, lo=-1, hi=1)
    ln_s, ln_t = _u(rng, 8, lo=0.5, hi=1.5), _u(rng, 8)
    out.append(_run("layer_norm", _projected(layer_norm, (2, 3, 8), rng), [tok, ln_s, ln_t], NONLINEAR_TOL))

    layer = EncoderLayer(8, 2, 16, rng=rng)
    tok1 = _u(rng, 1, 3, 8, lo=-1, hi=1)
    params = [t for _, t in layer.named_parameters()]
    out.append(_run("multi_head_attention", _projected(lambda x, *_: multi_head_attention(x, layer), (1, 3, 8), rng),
                    [tok1] + params, NONLINEAR_TOL))
    out.append(_run("encoder_layer", _projected(lambda x, *_: layer(x), (1, 3, 8), rng), [tok1] + params,
                    NONLINEAR_TOL))
    block = BasicBlock(2, 4, 2, rng=rng)
    bimg = _u(rng, 2, 2, 6, 6, lo=-1, hi=1)
    out.append(_run("residual_block", _projected(lambda x, *_: block(x), (2, 4, 3, 3), rng),
                    [bimg] + block.parameters(), NONLINEAR_TOL))
    return out


def losses_suite(seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    out: list[CheckResult] = []
    logits = _u(rng, 5, 6)
    targets = np.array([0, 3, -1, 5, 2])
    out.append(_run("cross_entropy", lambda z: cross_entropy(z, targets), [logits], NONLINEAR_TOL))
    au_logits = _u(rng, 6, 4)
    au_t = rng.integers(0, 2, size=(6, 4))
    au_t[1, 2] = -1
    au_t[0] = [1, 1, 1, 1]
    w = compute_au_weights(au_t)
    out.append(_run("weighted_bce", lambda z: weighted_bce(z, au_t, w), [au_logits], NONLINEAR_TOL))
    pv, pa = _u(rng, 8, lo=-0.9, hi=0.9), _u(rng, 8, lo=-0.9, hi=0.9)
    tv, ta = rng.uniform(-1, 1, 8), rng.uniform(-1, 1, 8)
    tv[3] = -5.0
    out.append(_run("ccc_loss", lambda v, a: ccc_loss(v, a, tv, ta), [pv, pa], NONLINEAR_TOL))

    def total(z, e, v, a):
        return combined_loss({"EXPR": cross_entropy(e, targets[:4]), "AU": weighted_bce(z[:4], au_t[:4], w),
                              "VA": ccc_loss(v[:4], a[:4], tv[:4], ta[:4])}, (1.0, 0.5, 2.0)).total

    out.append(_run("combined_loss", total, [au_logits, _u(rng, 4, 6), pv, pa], NONLINEAR_TOL))
    return out


def model_suite(seed: int = 0, n_params: int = 20) -> list[CheckResult]:
    """End-to-end combined loss vs ``n_params`` random parameter coordinates per backbone."""
    rng = np.random.default_rng(seed)
    out: list[CheckResult] = []
    B = 4
    expr = np.array([0, 3, 7, 5])
    aus = rng.integers(0, 2, size=(B, 12))
    va = rng.uniform(-1, 1, size=(B, 2))
    weights = compute_au_weights(np.vstack([aus, np.ones((1, 12), int), np.zeros((1, 12), int)]))
    for backbone in ("resnet_lite", "hrnet_lite"):
        model = build_model(ModelConfig(backbone=backbone, input_size=32), seed)
        images = Tensor(rng.uniform(0, 1, size=(B, 3, 32, 32)))
        named = list(model.named_parameters())
        tensors = [t for _, t in named]
        picks = rng.choice(len(tensors), size=n_params, replace=True)
        indices = [(int(k), int(rng.integers(0, tensors[k].size))) for k in picks]

        def loss(*_):
            o = model(images)
            return combined_loss({"EXPR": cross_entropy(o["expr_logits"], expr),
                                  "AU": weighted_bce(o["au_logits"], aus, weights),
                                  "VA": ccc_loss(o["va"][:, 0], o["va"][:, 1], va[:, 0], va[:, 1])}).total

        out.append(_run(f"model[{backbone}] {n_params} params", loss, tensors, NONLINEAR_TOL, indices, MODEL_H))
    return out


def run_scope(scope: str, seed: int = 0) -> list[CheckResult]:
    if scope == "ops":
        return ops_suite(seed)
    if scope == "losses":
        return losses_suite(seed)
    if scope == "model":
        return model_suite(seed)
    raise ValueError(f"unknown scope {scope!r}; expected one of {SCOPES}")


def format_results(results: list[CheckResult]) -> str:
    width = max(len(r.name) for r in results)
    lines = [f"{'check':<{width}}  {'max rel err':>11}  {'tol':>7}  status"]
    for r in results:
        lines.append(f"{r.name:<{width}}  {r.error:11.3e}  {r.tol:7.0e}  {'ok' if r.ok else 'FAIL'}")
    return "\n".join(lines)
