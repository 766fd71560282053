"""Training losses for both network stages.

All losses take channel-first tensors, optionally batched, and average over
pixels (and over the batch). Color and image losses sum the squared error
over the three channels before averaging, so a black/white mismatch costs 3.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ParameterError, ShapeError

BCE_EPS = 1e-7


@dataclass(frozen=True)
class CoarseLossWeights:
    alpha_m: float = 0.25
    alpha_c: float = 1.1
    alpha_r: float = 0.01
    alpha_i: float = 1.0

    def __post_init__(self):
        if min(self.alpha_m, self.alpha_c, self.alpha_r, self.alpha_i) < 0:
            raise ParameterError("loss weights must be non-negative")


@dataclass(frozen=True)
class RefineLossWeights:
    alpha_c_r: float = 1.0
    alpha_r_r: float = 1.0

    def __post_init__(self):
        if min(self.alpha_c_r, self.alpha_r_r) < 0:
            raise ParameterError("loss weights must be non-negative")


def _t(x, like: T.Tensor | None = None) -> T.Tensor:
    if isinstance(x, T.Tensor):
        return x
    return T.Tensor(np.asarray(x, dtype=like.dtype if like is not None else None))


def _same_shape(name: str, a: T.Tensor, b: T.Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{name}: prediction and target shapes differ", pred=list(a.shape), target=list(b.shape))


def _pixel_mean(per_pixel: T.Tensor) -> T.Tensor:
    return per_pixel.mean()


def mask_loss(prob, target) -> T.Tensor:
    """Binary cross-entropy of foreground probability against a 0/1 mask."""
    prob = _t(prob)
    target = _t(target, prob)
    _same_shape("mask_loss", prob, target)
    p = T.clamp(prob, BCE_EPS, 1.0 - BCE_EPS)
    t = target.data
    ll = T.add(T.mul(T.log(p), t), T.mul(T.log(1.0 - p), 1.0 - t))
    return -_pixel_mean(ll)


def _channel_sq_norm(pred, target, name: str) -> T.Tensor:
    pred = _t(pred)
    target = _t(target, pred)
    _same_shape(name, pred, target)
    diff = pred - target
    return _pixel_mean(T.square(diff).sum(axis=-3))


def filter_loss(pred, target) -> T.Tensor:
    return _channel_sq_norm(pred, target, "filter_loss")


def reconstruction_loss(pred, target) -> T.Tensor:
    return _channel_sq_norm(pred, target, "reconstruction_loss")


def flow_loss(pred, target) -> T.Tensor:
    """Average end-point error between two ``[2,H,W]`` flow fields."""
    pred = _t(pred)
    target = _t(target, pred)
    _same_shape("flow_loss", pred, target)
    return _pixel_mean(T.vector_norm(pred - target, axis=-3))


def coarse_total(l_m, l_c, l_r, l_i, w: CoarseLossWeights = CoarseLossWeights()) -> T.Tensor:
    return T.weighted_sum([l_m, l_c, l_r, l_i], [w.alpha_m, w.alpha_c, w.alpha_r, w.alpha_i])


def refine_total(l_c, l_r, w: RefineLossWeights = RefineLossWeights()) -> T.Tensor:
    return T.weighted_sum([l_c, l_r], [w.alpha_c_r, w.alpha_r_r])
