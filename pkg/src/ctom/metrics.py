"""Evaluation metrics for predicted mattes and reconstructed images.

Inputs are channel-last numpy arrays: flows ``H x W x 2``, images and
filters ``H x W x 3``, masks ``H x W``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import io
from .errors import DataError, ShapeError
from .matte import Matte, binarize_mask, composite

PSNR_CAP = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


@dataclass
class MatteMetrics:
    f_epe: float
    f_roi: float
    m_iou: float
    c_mse: float
    i_mse: float

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class ImageMetrics:
    psnr: float
    ssim: float


def _same(a: np.ndarray, b: np.ndarray, what: str) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shapes differ", a=list(a.shape), b=list(b.shape))
    return a, b


def epe(flow: np.ndarray, flow_gt: np.ndarray, roi: np.ndarray | None = None) -> float:
    """Mean end-point error, over the whole image or only where ``roi`` is set."""
    flow, flow_gt = _same(flow, flow_gt, "epe")
    err = np.sqrt(((flow - flow_gt) ** 2).sum(axis=-1))
    if roi is None:
        return float(err.mean())
    roi = np.asarray(roi) > 0.5
    if roi.shape != err.shape:
        raise ShapeError("roi must match the flow size", roi=list(roi.shape), flow=list(err.shape))
    if not roi.any():
        raise DataError("region of interest is empty")
    return float(err[roi].mean())


def iou(mask: np.ndarray, mask_gt: np.ndarray) -> float:
    a = np.asarray(mask) > 0.5
    b = np.asarray(mask_gt) > 0.5
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)


def mse(a: np.ndarray, b: np.ndarray) -> float:
    """Per-pixel squared norm over the last axis, averaged over pixels."""
    a, b = _same(a, b, "mse")
    return float(((a - b) ** 2).sum(axis=-1).mean())


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    a, b = _same(a, b, "psnr")
    err = float(((a - b) ** 2).mean())
    if err == 0.0:
        return PSNR_CAP
    return float(min(PSNR_CAP, 10.0 * np.log10(1.0 / err)))


def _gaussian_1d(size: int, sigma: float) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, k: np.ndarray) -> np.ndarray:
    n = k.size
    rows = np.lib.stride_tricks.sliding_window_view(img, n, axis=0) @ k
    return np.lib.stride_tricks.sliding_window_view(rows, n, axis=1) @ k


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean SSIM of the luma planes over fully-covered 11x11 Gaussian windows."""
    a, b = _same(a, b, "ssim")
    la = a.mean(axis=-1) if a.ndim == 3 else a
    lb = b.mean(axis=-1) if b.ndim == 3 else b
    if la.shape[0] < SSIM_WINDOW or la.shape[1] < SSIM_WINDOW:
        raise ShapeError("image smaller than the SSIM window", shape=list(la.shape), window=SSIM_WINDOW)
    if np.array_equal(la, lb):
        return 1.0
    k = _gaussian_1d(SSIM_WINDOW, SSIM_SIGMA)
    c1 = (SSIM_K1 * 1.0) ** 2
    c2 = (SSIM_K2 * 1.0) ** 2
    mu_a = _filter_valid(la, k)
    mu_b = _filter_valid(lb, k)
    var_a = np.maximum(_filter_valid(la * la, k) - mu_a**2, 0.0)
    var_b = np.maximum(_filter_valid(lb * lb, k) - mu_b**2, 0.0)
    cov = _filter_valid(la * lb, k) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float((num / den).mean())


def image_metrics(a: np.ndarray, b: np.ndarray) -> ImageMetrics:
    return ImageMetrics(psnr(a, b), ssim(a, b))


def evaluate_sample(
    pred: Matte, gt: Matte, background: np.ndarray, input_image: np.ndarray, quantize: bool = False
) -> MatteMetrics:
    """Score one predicted matte against ground truth.

    The reconstruction composites the prediction with its soft mask, which
    is how ground-truth inputs with feathered borders were rendered. With
    ``quantize`` it is rounded to 8 bits first, matching PNG inputs.
    """
    roi = binarize_mask(gt.mask)
    recon = composite(pred, background, binarize=False)
    if quantize:
        recon = io.quantize(recon)
    return MatteMetrics(
        f_epe=epe(pred.flow, gt.flow),
        f_roi=epe(pred.flow, gt.flow, roi),
        m_iou=iou(binarize_mask(pred.mask), roi),
        c_mse=mse(pred.filter, gt.filter),
        i_mse=mse(recon, input_image),
    )
