"""Matte data model and the forward image-formation model.

A colored matte is the triple (mask, color filter, refractive flow). An
image is rendered from a background ``B`` as

    I = (1 - m) * B + m * min(C, warp(B, R))

per pixel and per channel. The colorless variant replaces the min with a
scalar attenuation ``rho * warp(B, R)``.

Arrays here are channel-last numpy arrays (``H x W x 3`` images); the tensor
path used by training is channel-first.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import DataError, ParameterError, ShapeError

MIN_SIZE = 8


def check_image(img: np.ndarray, name: str = "image") -> np.ndarray:
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ShapeError(f"{name} must be H x W x 3", shape=list(img.shape))
    if img.shape[0] < MIN_SIZE or img.shape[1] < MIN_SIZE:
        raise ShapeError(f"{name} must be at least {MIN_SIZE}x{MIN_SIZE}", shape=list(img.shape))
    return img


@dataclass
class Matte:
    mask: np.ndarray  # H x W, foreground probability
    filter: np.ndarray  # H x W x 3
    flow: np.ndarray  # H x W x 2, (dx, dy) in pixels

    def __post_init__(self):
        if self.mask.ndim != 2:
            raise ShapeError("mask must be H x W", shape=list(self.mask.shape))
        h, w = self.mask.shape
        if self.filter.shape != (h, w, 3):
            raise ShapeError("filter must be H x W x 3", shape=list(self.filter.shape), expected=[h, w, 3])
        if self.flow.shape != (h, w, 2):
            raise ShapeError("flow must be H x W x 2", shape=list(self.flow.shape), expected=[h, w, 2])

    @property
    def height(self) -> int:
        return self.mask.shape[0]

    @property
    def width(self) -> int:
        return self.mask.shape[1]

    def validate(self) -> "Matte":
        """Check value ranges; raises DataError on violation."""
        for name, arr in (("mask", self.mask), ("filter", self.filter), ("flow", self.flow)):
            if not np.all(np.isfinite(arr)):
                raise DataError(f"{name} contains non-finite values")
        if self.mask.min() < 0 or self.mask.max() > 1:
            raise DataError("mask values outside [0, 1]")
        if self.filter.min() < 0 or self.filter.max() > 1:
            raise DataError("filter values outside [0, 1]")
        if np.abs(self.flow[..., 0]).max() > self.width or np.abs(self.flow[..., 1]).max() > self.height:
            raise DataError("flow exceeds the [-W, W] x [-H, H] range")
        return self

    def to_chw(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return (
            self.mask[None],
            np.ascontiguousarray(self.filter.transpose(2, 0, 1)),
            np.ascontiguousarray(self.flow.transpose(2, 0, 1)),
        )

    @classmethod
    def from_chw(cls, mask: np.ndarray, filt: np.ndarray, flow: np.ndarray) -> "Matte":
        mask = np.asarray(mask)
        if mask.ndim == 3:
            mask = mask[0]
        return cls(mask, np.asarray(filt).transpose(1, 2, 0), np.asarray(flow).transpose(1, 2, 0))

    def astype(self, dtype) -> "Matte":
        return Matte(self.mask.astype(dtype), self.filter.astype(dtype), self.flow.astype(dtype))


@dataclass
class ColorlessMatte:
    mask: np.ndarray
    attenuation: np.ndarray  # H x W, rho in [0, 1]
    flow: np.ndarray

    def __post_init__(self):
        if self.attenuation.shape != self.mask.shape or self.flow.shape != (*self.mask.shape, 2):
            raise ShapeError("colorless matte planes disagree in size")


def identity_matte(width: int, height: int) -> Matte:
    """Empty mask, white filter, zero flow: composites to the background."""
    return Matte(
        np.zeros((height, width)),
        np.ones((height, width, 3)),
        np.zeros((height, width, 2)),
    )


def binarize_mask(mask: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    if not 0.0 < threshold < 1.0:
        raise ParameterError("threshold must lie in (0, 1)", threshold=threshold)
    return (np.asarray(mask) >= threshold).astype(np.float64)


def composite_tensor(mask: T.Tensor, filt: T.Tensor, flow: T.Tensor, background) -> T.Tensor:
    """Differentiable compositor on channel-first tensors.

    ``mask`` is ``[1,H,W]`` (or ``[N,1,H,W]``) and broadcasts over the three
    color channels. Output is clamped to [0, 1].
    """
    bg = background if isinstance(background, T.Tensor) else T.Tensor(np.asarray(background, dtype=flow.dtype))
    if bg.shape[-2:] != flow.shape[-2:] or filt.shape != bg.shape or mask.shape[-2:] != bg.shape[-2:]:
        raise ShapeError(
            "matte and background sizes differ",
            background=list(bg.shape),
            filter=list(filt.shape),
            flow=list(flow.shape),
        )
    warped = T.bilinear_warp(bg, flow)
    fg = T.minimum(filt, warped)
    out = T.add(T.mul(1.0 - mask, bg), T.mul(mask, fg))
    return T.clamp(out, 0.0, 1.0)


def _check_pair(h: int, w: int, background: np.ndarray) -> np.ndarray:
    background = np.asarray(background, dtype=np.float64)
    if background.shape != (h, w, 3):
        raise ShapeError("matte and background sizes differ", matte=[h, w], background=list(background.shape))
    return background


def composite(matte: Matte, background: np.ndarray, binarize: bool = False) -> np.ndarray:
    """Render an image from a colored matte over ``background`` (H x W x 3)."""
    background = _check_pair(matte.height, matte.width, background)
    mask = binarize_mask(matte.mask) if binarize else np.asarray(matte.mask, dtype=np.float64)
    m, c, r = Matte(mask, matte.filter.astype(np.float64), matte.flow.astype(np.float64)).to_chw()
    out = composite_tensor(T.Tensor(m), T.Tensor(c), T.Tensor(r), background.transpose(2, 0, 1))
    return out.data.transpose(1, 2, 0)


def composite_colorless(matte: ColorlessMatte, background: np.ndarray) -> np.ndarray:
    background = _check_pair(*matte.mask.shape, background)
    flow = T.Tensor(np.asarray(matte.flow, dtype=np.float64).transpose(2, 0, 1))
    warped = T.bilinear_warp(background.transpose(2, 0, 1), flow).data.transpose(1, 2, 0)
    m = np.asarray(matte.mask, dtype=np.float64)[..., None]
    rho = np.asarray(matte.attenuation, dtype=np.float64)[..., None]
    return np.clip((1 - m) * background + m * rho * warped, 0.0, 1.0)
