"""Finite-difference checks of every taped primitive, the losses and the full model."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import losses as L
from . import network as N
from . import tensor as T
from .tensor import Tensor

LOSS_TOL = 1e-6
NETWORK_TOL = 1e-5


@dataclass
class CheckResult:
    name: str
    scope: str
    max_rel_error: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol


def _rand(rng, *shape):
    return rng.standard_normal(shape)


def _mask(rng, shape, p=0.4):
    m = (rng.random(shape) < p).astype(np.float64)
    m.reshape(-1)[0], m.reshape(-1)[-1] = 0.0, 1.0  # both classes present
    return m


def _primitive_cases(rng) -> dict[str, tuple[Callable[[Tensor], Tensor], np.ndarray]]:
    """name -> (scalar function of x, point x)."""
    x4 = _rand(rng, 2, 3, 4, 4)
    other = Tensor(_rand(rng, 2, 3, 4, 4))
    w = Tensor(_rand(rng, 4, 3, 3, 3) * 0.5)
    b = Tensor(_rand(rng, 4))
    proj = Tensor(_rand(rng, 2, 3, 8, 8))
    pos = rng.uniform(0.5, 2.0, size=(2, 3, 4, 4))
    tgt = _mask(rng, (2, 3, 4, 4))
    # weighted sums keep gradients non-trivial
    c4 = Tensor(_rand(rng, 2, 3, 4, 4))
    w2 = Tensor(_rand(rng, 2, 3, 3, 3))

    def wsum(y, ref=None):
        ref = ref if ref is not None else Tensor(np.linspace(-1, 1, y.size).reshape(y.shape))
        return T.reduce_sum(T.mul(y, ref))

    return {
        "add": (lambda x: wsum(T.add(x, other)), x4),
        "sub": (lambda x: wsum(T.sub(other, x)), x4),
        "mul": (lambda x: wsum(T.mul(x, x)), x4),
        "scale": (lambda x: wsum(T.scale(x, -2.5)), x4),
        "add_scalar": (lambda x: wsum(T.mul(T.add_scalar(x, 0.3), c4)), x4),
        "relu": (lambda x: wsum(T.relu(x)), x4),
        "sigmoid": (lambda x: wsum(T.sigmoid(x)), x4),
        "log": (lambda x: wsum(T.log(x)), pos),
        "sqrt": (lambda x: wsum(T.sqrt(x)), pos),
        "reciprocal": (lambda x: wsum(T.reciprocal(x)), pos),
        "softplus": (lambda x: wsum(T.softplus(x)), x4 * 5),
        "bce_with_logits": (lambda x: wsum(T.bce_with_logits(x, tgt)), x4 * 5),
        "reduce_sum_axis": (lambda x: wsum(T.reduce_sum(x, axis=(1, 3), keepdims=True)), x4),
        "reduce_mean": (lambda x: T.reduce_mean(T.mul(x, c4)), x4),
        "concat": (lambda x: wsum(T.concat([x, other, x], axis=1)), x4),
        "slice_batch": (lambda x: wsum(T.slice_batch(x, 1, 2)), x4),
        "channel_dot": (lambda x: wsum(T.channel_dot(x, other)), x4),
        "l2_normalize": (lambda x: wsum(T.l2_normalize(x)), x4),
        "conv2d_input": (lambda x: wsum(T.conv2d(x, w, b, stride=1, pad=1)), x4),
        "conv2d_weight": (lambda x: wsum(T.conv2d(other, x, b, stride=2, pad=1)), w.data),
        "conv2d_bias": (lambda x: wsum(T.conv2d(other, w, x, stride=1, pad=0)), b.data),
        "upsample_nearest": (lambda x: wsum(T.upsample(x, 2, "nearest")), x4),
        "upsample_bilinear": (lambda x: wsum(T.upsample(x, 4, "bilinear")), x4),
        "conv_relu_mean": (lambda x: T.reduce_mean(T.relu(T.conv2d(x, w2, None, 1, 1))),
                           proj.data),
        "diamond": (lambda x: wsum(T.mul(T.sigmoid(x), T.relu(x))), x4),
    }


def _loss_cases(rng):
    f2 = Tensor(_rand(rng, 2, 8, 4, 4))
    y = _mask(rng, (2, 1, 4, 4))
    logit_y = _mask(rng, (2, 1, 6, 6))
    con_e = L.LossConfig(distance_kind="euclidean", margin=5.0)
    con_c = L.LossConfig(distance_kind="cosine")
    return {
        "contrastive_euclidean": (lambda x: L.contrastive_loss(x, f2, y, con_e), _rand(rng, 2, 8, 4, 4)),
        "contrastive_cosine": (lambda x: L.contrastive_loss(x, f2, y, con_c), _rand(rng, 2, 8, 4, 4)),
        "hsac": (lambda x: L.hsac_loss(x, f2, y, 0.2), _rand(rng, 2, 8, 4, 4)),
        "hsac_oneline": (lambda x: L.hsac_loss_oneline(x, f2, y, 0.2), _rand(rng, 2, 8, 4, 4)),
        "hsac_tau_0.05": (lambda x: L.hsac_loss(x, f2, y, 0.05), _rand(rng, 2, 8, 4, 4)),
        "cross_entropy": (lambda x: L.cross_entropy_loss(x, logit_y), _rand(rng, 2, 1, 6, 6) * 3),
        "dice": (lambda x: L.dice_loss(x, logit_y), _rand(rng, 2, 1, 6, 6) * 3),
    }


def check_primitives(trials: int = 5, seed: int = 0) -> list[CheckResult]:
    worst: dict[str, float] = {}
    for t in range(trials):
        rng = np.random.default_rng([seed, t])
        for name, (f, x) in _primitive_cases(rng).items():
            err = T.finite_diff_check(f, Tensor(x), h=1e-6)
            worst[name] = max(worst.get(name, 0.0), err)
    return [CheckResult(k, "primitives", v, LOSS_TOL) for k, v in worst.items()]


def check_losses(trials: int = 5, seed: int = 0) -> list[CheckResult]:
    worst: dict[str, float] = {}
    for t in range(trials):
        rng = np.random.default_rng([seed, 100 + t])
        for name, (f, x) in _loss_cases(rng).items():
            err = T.finite_diff_check(f, Tensor(x), h=1e-6)
            worst[name] = max(worst.get(name, 0.0), err)
    return [CheckResult(k, "losses", v, LOSS_TOL) for k, v in worst.items()]


def small_model(decoder: N.DecoderKind = "metric", seed: int = 0) -> N.ModelParams:
    cfg = N.EncoderConfig(input_size=32, decoder=decoder)
    return N.init_params(cfg, seed, dtype=np.float64)


def model_loss(params: N.ModelParams, a: np.ndarray, b: np.ndarray, y: np.ndarray,
               tau: float = 0.2) -> Tensor:
    out = N.forward(Tensor(a), Tensor(b), params)
    metric = L.hsac_loss(out.u1, out.u2, T.downsample_nearest(y, 2), tau)
    if out.logits is None:
        return metric
    return L.total_loss(metric, L.cross_entropy_loss(out.logits, y), L.dice_loss(out.logits, y),
                        L.LossConfig(tau=tau))


def check_network(trials: int = 5, seed: int = 0, coords_per_param: int = 2) -> list[CheckResult]:
    """Full-model loss vs central differences on a 1x3x32x32 pair.

    Every parameter tensor is checked at ``coords_per_param`` random entries.
    """
    worst = 0.0
    for t in range(trials):
        rng = np.random.default_rng([seed, 200 + t])
        params = small_model(seed=int(rng.integers(1 << 31)))
        a = rng.random((1, 3, 32, 32))
        b = np.clip(a + 0.3 * rng.standard_normal(a.shape), 0, 1)
        y = np.zeros((1, 1, 32, 32))
        y[..., 8:20, 4:16] = 1
        for name in params.names():
            base = params[name]

            def f(x, name=name):
                swapped = N.ModelParams(params.config, {**params.tensors, name: x})
                return model_loss(swapped, a, b, y)

            k = min(coords_per_param, base.size)
            coords = rng.choice(base.size, size=k, replace=False)
            worst = max(worst, T.finite_diff_check(f, base, h=1e-6, coords=coords))
    return [CheckResult("full_model", "network", worst, NETWORK_TOL)]


def run(scope: str = "all", trials: int = 5, seed: int = 0) -> tuple[list[CheckResult], float]:
    if scope not in ("losses", "network", "all"):
        raise ValueError(f"unknown scope {scope!r}")
    t0 = time.perf_counter()
    results: list[CheckResult] = []
    if scope in ("losses", "all"):
        results += check_primitives(trials, seed) + check_losses(trials, seed)
    if scope in ("network", "all"):
        results += check_network(trials, seed)
    return results, time.perf_counter() - t0
