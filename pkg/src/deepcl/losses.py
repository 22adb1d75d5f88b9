"""Metric-space and output-space objectives."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal

import numpy as np

from . import tensor as T
from .tensor import DimensionError, ParameterError, Tensor


@dataclass
class LossConfig:
    tau: float = 0.2
    margin: float | None = None  # None -> 2.0 euclidean / 1.0 cosine
    seg_weight: float = 1.0
    metric_weight: float = 1.0
    distance_kind: Literal["euclidean", "cosine"] = "euclidean"

    def __post_init__(self):
        if self.tau <= 0:
            raise ParameterError(f"tau must be > 0, got {self.tau}")
        if self.margin is None:
            self.margin = 2.0 if self.distance_kind == "euclidean" else 1.0
        if self.margin <= 0:
            raise ParameterError(f"margin must be > 0, got {self.margin}")
        if self.seg_weight < 0 or self.metric_weight < 0:
            raise ParameterError("loss weights must be >= 0")
        if self.distance_kind not in ("euclidean", "cosine"):
            raise ParameterError(f"unknown distance_kind {self.distance_kind!r}")


def _mask(y, like: Tensor) -> np.ndarray:
    m = y.data if isinstance(y, Tensor) else np.asarray(y)
    m = m.astype(like.dtype, copy=False)
    if m.shape != like.shape:
        raise DimensionError(f"mask shape {m.shape} does not match {like.shape}")
    return m


def cosine_distance(f1: Tensor, f2: Tensor) -> Tensor:
    """Per-pixel cosine similarity of two [N,C,H,W] maps, shape [N,1,H,W].

    Called a "distance" for symmetry with the euclidean variant; 1 means
    identical direction.
    """
    return T.channel_dot(T.l2_normalize(f1), T.l2_normalize(f2))


def euclidean_distance(f1: Tensor, f2: Tensor, eps: float = 1e-12) -> Tensor:
    d = T.sub(f1, f2)
    return T.sqrt(T.add_scalar(T.channel_dot(d, d), eps))


def contrastive_from_distance(d: Tensor, y, margin: float) -> Tensor:
    """Per-class mean of D over unchanged pixels plus mean of max(0, m - D) over changed ones.

    A class with no pixels contributes 0.
    """
    if margin <= 0:
        raise ParameterError(f"margin must be > 0, got {margin}")
    m1 = _mask(y, d)
    m0 = 1 - m1
    n0, n1 = float(m0.sum()), float(m1.sum())
    terms = []
    if n0 > 0:
        terms.append(T.scale(T.reduce_sum(T.mul(d, Tensor(m0))), 1.0 / n0))
    if n1 > 0:
        hinge = T.relu(T.add_scalar(T.scale(d, -1.0), margin))
        terms.append(T.scale(T.reduce_sum(T.mul(hinge, Tensor(m1))), 1.0 / n1))
    if not terms:
        return Tensor(np.zeros((), dtype=d.dtype))
    return terms[0] if len(terms) == 1 else T.add(terms[0], terms[1])


def contrastive_loss(f1: Tensor, f2: Tensor, y, cfg: LossConfig) -> Tensor:
    """Margin contrastive loss with per-class pixel-count normalisers.

    Unchanged pixels pull the distance toward 0; changed pixels push it above
    ``cfg.margin``. With ``distance_kind="cosine"`` the distance is 1 - cos.
    """
    if f1.shape != f2.shape:
        raise DimensionError(f"feature shapes differ: {f1.shape} vs {f2.shape}")
    if cfg.distance_kind == "euclidean":
        d = euclidean_distance(f1, f2)
    else:
        d = T.add_scalar(T.scale(cosine_distance(f1, f2), -1.0), 1.0)
    return contrastive_from_distance(d, y, cfg.margin)


def hsac_from_similarity(d_cos: Tensor, y, tau: float) -> Tensor:
    """Mean hard-sample-aware BCE given the cosine similarity map directly.

    Unchanged pixels pay -log sigmoid(d/tau) = softplus(-d/tau); changed
    pixels pay -log(1 - sigmoid(d/tau)) = softplus(d/tau).
    """
    if tau <= 0:
        raise ParameterError(f"tau must be > 0, got {tau}")
    m1 = _mask(y, d_cos)
    z = T.scale(d_cos, 1.0 / tau)
    per_px = T.add(T.mul(T.softplus(T.scale(z, -1.0)), Tensor(1 - m1)),
                   T.mul(T.softplus(z), Tensor(m1)))
    return T.reduce_mean(per_px)


def hsac_loss(f1: Tensor, f2: Tensor, y, tau: float) -> Tensor:
    if tau <= 0:
        raise ParameterError(f"tau must be > 0, got {tau}")
    if f1.shape != f2.shape:
        raise DimensionError(f"feature shapes differ: {f1.shape} vs {f2.shape}")
    return hsac_from_similarity(cosine_distance(f1, f2), y, tau)


def hsac_loss_oneline(f1: Tensor, f2: Tensor, y, tau: float) -> Tensor:
    """Same objective as :func:`hsac_loss` written as BCE-with-logits on -cos/tau."""
    if tau <= 0:
        raise ParameterError(f"tau must be > 0, got {tau}")
    sim = T.reduce_sum(T.mul(T.l2_normalize(f1), T.l2_normalize(f2)), axis=1, keepdims=True)
    return T.reduce_mean(T.bce_with_logits(T.scale(sim, -1.0 / tau), _mask(y, sim)))


def _sigmoid(x: float) -> float:
    return 1 / (1 + math.exp(-x)) if x >= 0 else math.exp(x) / (1 + math.exp(x))


def hsac_gradient_weight(d_cos: float, y: int, tau: float) -> float:
    """Magnitude of the coefficient on d(cos)/d(theta) for one pixel pair."""
    if tau <= 0:
        raise ParameterError(f"tau must be > 0, got {tau}")
    s = _sigmoid(d_cos / tau)
    return s if y == 1 else 1 - s


def cross_entropy_loss(logits: Tensor, y) -> Tensor:
    return T.reduce_mean(T.bce_with_logits(logits, _mask(y, logits)))


def dice_loss(logits: Tensor, y, smooth: float = 1.0) -> Tensor:
    """1 - (2 sum(p y) + s) / (sum p + sum y + s), p = sigmoid(logits)."""
    m = _mask(y, logits)
    p = T.sigmoid(logits)
    inter = T.reduce_sum(T.mul(p, Tensor(m)))
    num = T.add_scalar(T.scale(inter, 2.0), smooth)
    den = T.add_scalar(T.reduce_sum(p), float(m.sum()) + smooth)
    ratio = T.mul(num, T.reciprocal(den))
    return T.add_scalar(T.scale(ratio, -1.0), 1.0)


def total_loss(metric: Tensor | None, ce: Tensor | None, dice: Tensor | None,
               cfg: LossConfig) -> Tensor:
    """metric_weight * metric + seg_weight * (ce + dice); absent terms are skipped."""
    parts = []
    if metric is not None and cfg.metric_weight:
        parts.append(T.scale(metric, cfg.metric_weight))
    for seg in (ce, dice):
        if seg is not None and cfg.seg_weight:
            parts.append(T.scale(seg, cfg.seg_weight))
    if not parts:
        raise ParameterError("total_loss: no active loss component")
    out = parts[0]
    for p in parts[1:]:
        out = T.add(out, p)
    return out
