"""Harmonization metrics on the 0-255 scale and the two reference losses.

Images are stored in [0, 1]; every metric rescales by 255 internally so MSE
values land in the tens-to-hundreds range typical of harmonization tables.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from .errors import (
    DegenerateAllZeroError,
    DimensionMismatchError,
    EmptyMaskError,
    ShapeMismatchError,
    TooSmallError,
)
from .imaging import Image, Mask

PIXEL_MAX = 255.0
PSNR_CAP = 100.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
EVAL_SIZE = 256
CR_NEGATIVES = 3  # negatives per anchor used in training
CR_WEIGHT = 0.3  # weight of the contrastive term in the VAE objective


@dataclass(frozen=True)
class MetricsRecord:
    psnr: float
    mse: float
    fmse: float
    ssim: float


def _pair(a: Image, b: Image):
    if a.shape != b.shape:
        raise ShapeMismatchError(f"{a.shape} vs {b.shape}")
    return a.data * PIXEL_MAX, b.data * PIXEL_MAX


def mse(a: Image, b: Image) -> float:
    x, y = _pair(a, b)
    return float(np.mean((x - y) ** 2))


def psnr_from_mse(value: float) -> float:
    if value < PIXEL_MAX ** 2 * 1e-10:
        return PSNR_CAP
    return 10.0 * math.log10(PIXEL_MAX ** 2 / value)


def psnr(a: Image, b: Image) -> float:
    return psnr_from_mse(mse(a, b))


def fmse(a: Image, b: Image, mask: Mask) -> float:
    """MSE over foreground pixels only (all channels)."""
    x, y = _pair(a, b)
    if mask.shape != a.shape[:2]:
        raise ShapeMismatchError(f"mask {mask.shape} vs image {a.shape[:2]}")
    if not mask.data.any():
        raise EmptyMaskError("fMSE needs at least one foreground pixel")
    return float(np.mean((x[mask.data] - y[mask.data]) ** 2))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    half = (size - 1) / 2.0
    g = np.exp(-((np.arange(size) - half) ** 2) / (2.0 * sigma ** 2))
    return g / g.sum()


def _filter_valid(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Separable Gaussian correlation restricted to fully covered positions."""
    k = g.size // 2
    y = ndimage.correlate1d(x, g, axis=0, mode="constant")
    y = ndimage.correlate1d(y, g, axis=1, mode="constant")
    return y[k:x.shape[0] - k, k:x.shape[1] - k]


def ssim_map(x: np.ndarray, y: np.ndarray, window: int = SSIM_WINDOW,
             sigma: float = SSIM_SIGMA) -> np.ndarray:
    """Local SSIM of two single-channel arrays already on the 0-255 scale."""
    g = gaussian_window(window, sigma)
    c1 = (SSIM_K1 * PIXEL_MAX) ** 2
    c2 = (SSIM_K2 * PIXEL_MAX) ** 2
    mu_x = _filter_valid(x, g)
    mu_y = _filter_valid(y, g)
    sxx = _filter_valid(x * x, g) - mu_x * mu_x
    syy = _filter_valid(y * y, g) - mu_y * mu_y
    sxy = _filter_valid(x * y, g) - mu_x * mu_y
    num = (2.0 * mu_x * mu_y + c1) * (2.0 * sxy + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (sxx + syy + c2)
    return num / den


def ssim(a: Image, b: Image, window: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> float:
    """Mean local SSIM with a Gaussian window, averaged over channels."""
    x, y = _pair(a, b)
    if a.height < window or a.width < window:
        raise TooSmallError(f"SSIM needs at least {window}x{window}, got {a.height}x{a.width}")
    vals = [ssim_map(x[:, :, c], y[:, :, c], window, sigma).mean() for c in range(a.channels)]
    return float(np.mean(vals))


def resize_bilinear(data: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinear resampling with half-pixel centres and edge clamping."""
    data = np.asarray(data, dtype=np.float64)
    h, w = data.shape[:2]

    def axis(n_out, n_in):
        pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        pos = np.clip(pos, 0.0, n_in - 1)
        lo = np.floor(pos).astype(np.int64)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, pos - lo

    r0, r1, fr = axis(height, h)
    c0, c1, fc = axis(width, w)
    extra = (None,) * (data.ndim - 2)
    fr = fr[(slice(None), None) + extra]
    fc = fc[(None, slice(None)) + extra]
    top = data[r0][:, c0] * (1.0 - fc) + data[r0][:, c1] * fc
    bot = data[r1][:, c0] * (1.0 - fc) + data[r1][:, c1] * fc
    return top * (1.0 - fr) + bot * fr


def resize_nearest(data: np.ndarray, height: int, width: int) -> np.ndarray:
    data = np.asarray(data)
    h, w = data.shape[:2]
    rows = np.minimum(((np.arange(height) + 0.5) * h / height).astype(np.int64), h - 1)
    cols = np.minimum(((np.arange(width) + 0.5) * w / width).astype(np.int64), w - 1)
    return data[rows][:, cols]


def eval_protocol(pred: Image, gt: Image, mask: Mask, eval_size: Optional[int] = EVAL_SIZE,
                  resize: str = "bilinear") -> MetricsRecord:
    """Resize to ``eval_size`` square (masks by nearest neighbour) and score.

    ``eval_size=None`` scores at native resolution.
    """
    if pred.shape != gt.shape:
        raise ShapeMismatchError(f"{pred.shape} vs {gt.shape}")
    if mask.shape != gt.shape[:2]:
        raise ShapeMismatchError(f"mask {mask.shape} vs image {gt.shape[:2]}")
    if eval_size is not None and (gt.height, gt.width) != (eval_size, eval_size):
        resample = {"bilinear": resize_bilinear, "nearest": resize_nearest}[resize]
        pred = Image(np.clip(resample(pred.data, eval_size, eval_size), 0.0, 1.0))
        gt = Image(np.clip(resample(gt.data, eval_size, eval_size), 0.0, 1.0))
        mask = Mask(resize_nearest(mask.data, eval_size, eval_size))
    m = mse(pred, gt)
    return MetricsRecord(psnr=psnr_from_mse(m), mse=m, fmse=fmse(pred, gt, mask), ssim=ssim(pred, gt))


def latent_fg_mse(eps, eps_pred, mask, a_min: Optional[float] = None) -> float:
    """Foreground-weighted latent MSE: masked squared error over
    ``max(a_min, mask area)``; ``a_min`` defaults to ``H * W / 5``.

    ``eps`` and ``eps_pred`` are ``H x W x C`` (or ``H x W``); ``mask`` is a
    binary ``H x W`` array at latent resolution.
    """
    eps = np.asarray(eps, dtype=np.float64)
    eps_pred = np.asarray(eps_pred, dtype=np.float64)
    m = np.asarray(mask.data if isinstance(mask, Mask) else mask)
    if eps.shape != eps_pred.shape:
        raise ShapeMismatchError(f"{eps.shape} vs {eps_pred.shape}")
    if m.shape != eps.shape[:2]:
        raise ShapeMismatchError(f"mask {m.shape} vs latent {eps.shape[:2]}")
    if not np.all((m == 0) | (m == 1)):
        raise ValueError("latent mask must be binary")
    m = m.astype(bool)
    h, w = m.shape
    if a_min is None:
        a_min = h * w / 5.0
    sq = (eps - eps_pred) ** 2
    num = float(sq[m].sum())
    return num / max(float(a_min), float(m.sum()))


def contrastive_reg(f, f_pos, f_negs: Sequence) -> float:
    """``D(f, f+) / (D(f, f+) + sum_k D(f, f-_k))`` with ``D`` the l1 distance."""
    f = np.asarray(f, dtype=np.float64).ravel()
    f_pos = np.asarray(f_pos, dtype=np.float64).ravel()
    if len(f_negs) < 1:
        raise DimensionMismatchError("need at least one negative")
    negs = [np.asarray(n, dtype=np.float64).ravel() for n in f_negs]
    if f_pos.shape != f.shape or any(n.shape != f.shape for n in negs):
        raise DimensionMismatchError("feature vectors differ in length")
    d_pos = float(np.abs(f - f_pos).sum())
    d_neg = sum(float(np.abs(f - n).sum()) for n in negs)
    if d_pos + d_neg == 0.0:
        raise DegenerateAllZeroError("all distances are zero")
    return d_pos / (d_pos + d_neg)
