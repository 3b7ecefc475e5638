"""mu-law tonemapping, tonemapped L1 loss and tonemapped PSNR / SSIM.

The tonemap is normalized so that T(1) = 1:

    T(x) = log(1 + mu * x) / log(1 + mu)

Inputs are clamped at 0 first; ``count_negative`` reports how many values were clamped.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
import torch
from scipy.ndimage import correlate1d

from .core import ShapeError

log = logging.getLogger(__name__)

PSNR_CAP = 99.0


@dataclass(frozen=True)
class TonemapParams:
    mu: float = 5000.0

    def __post_init__(self):
        if not self.mu > 0:
            raise ValueError(f"mu must be positive, got {self.mu}")


DEFAULT_TONEMAP = TonemapParams()


def count_negative(x) -> int:
    if isinstance(x, torch.Tensor):
        return int((x < 0).sum())
    return int(np.count_nonzero(np.asarray(x) < 0))


def mu_tonemap(x, p: TonemapParams = DEFAULT_TONEMAP):
    if isinstance(x, torch.Tensor):
        return torch.log1p(p.mu * x.clamp(min=0)) / math.log1p(p.mu)
    x = np.asarray(x, dtype=np.float64)
    n_neg = count_negative(x)
    if n_neg:
        log.debug("mu_tonemap clamped %d negative values", n_neg)
    return np.log1p(p.mu * np.maximum(x, 0)) / math.log1p(p.mu)


def mu_tonemap_inverse(t, p: TonemapParams = DEFAULT_TONEMAP):
    t = np.asarray(t, dtype=np.float64)
    return np.expm1(t * math.log1p(p.mu)) / p.mu


def _check_shapes(a, b):
    if tuple(a.shape) != tuple(b.shape):
        raise ShapeError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def tonemapped_l1(pred, gt, p: TonemapParams = DEFAULT_TONEMAP):
    """Mean absolute difference of tonemapped images (tensor or array)."""
    _check_shapes(pred, gt)
    d = mu_tonemap(pred, p) - mu_tonemap(gt, p)
    if isinstance(d, torch.Tensor):
        return d.abs().mean()
    return float(np.mean(np.abs(d)))


def _as_np(x):
    if isinstance(x, torch.Tensor):
        return x.detach().cpu().double().numpy()
    return np.asarray(getattr(x, "data", x), dtype=np.float64)


def psnr(a, b, peak: float = 1.0) -> float:
    _check_shapes(a, b)
    mse = float(np.mean((np.asarray(a, np.float64) - np.asarray(b, np.float64)) ** 2))
    if mse == 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10 * math.log10(peak**2 / mse))


def psnr_tonemapped(pred, gt, p: TonemapParams = DEFAULT_TONEMAP) -> float:
    pred, gt = _as_np(pred), _as_np(gt)
    _check_shapes(pred, gt)
    return psnr(mu_tonemap(pred, p), mu_tonemap(gt, p))


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2
    g = np.exp(-(r**2) / (2 * sigma**2))
    return g / g.sum()


def _filter_valid(x: np.ndarray, win: np.ndarray) -> np.ndarray:
    pad = len(win) // 2
    y = correlate1d(correlate1d(x, win, axis=-1, mode="constant"), win, axis=-2, mode="constant")
    return y[..., pad:-pad, pad:-pad]


def ssim(a, b, *, win_size: int = 11, sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03,
         data_range: float = 1.0) -> float:
    """Mean SSIM over channels of (C, H, W) or (H, W) images, 'valid' Gaussian windows."""
    a = np.asarray(a, np.float64)
    b = np.asarray(b, np.float64)
    _check_shapes(a, b)
    if min(a.shape[-2:]) < win_size:
        raise ShapeError(f"image {a.shape[-2:]} smaller than the {win_size}x{win_size} window")
    win = gaussian_window(win_size, sigma)
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    mu_a = _filter_valid(a, win)
    mu_b = _filter_valid(b, win)
    var_a = _filter_valid(a * a, win) - mu_a**2
    var_b = _filter_valid(b * b, win) - mu_b**2
    cov = _filter_valid(a * b, win) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def ssim_tonemapped(pred, gt, p: TonemapParams = DEFAULT_TONEMAP) -> float:
    pred, gt = _as_np(pred), _as_np(gt)
    return ssim(mu_tonemap(pred, p), mu_tonemap(gt, p))
