"""Evaluation metrics and the bicubic resampling baseline.

PSNR uses joint-channel MSE on [0, 1] data; SSIM and NCC reuse the loss
module's statistical code so metric and loss can never drift apart.
"""

from __future__ import annotations

import numpy as np

from .errors import UsageError
from .losses import SsimParams, ncc_per_channel, ssim_per_channel


def psnr(pred, gt) -> float:
    """10*log10(1/MSE) in dB over all channels jointly; +inf when identical."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise UsageError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    diff = pred.astype(np.float64) - gt.astype(np.float64)
    mse = float((diff * diff).mean())
    if mse == 0.0:
        return float("inf")
    return float(10.0 * np.log10(1.0 / mse))


def ssim_metric(pred, gt, params: SsimParams = SsimParams()) -> float:
    """Channel mean of the per-channel SSIM index."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.ndim == 2:
        pred, gt = pred[None], gt[None]
    return float(np.mean([ssim_per_channel(pred[s], gt[s], params) for s in range(pred.shape[0])]))


def ncc_metric(pred, gt, diagnostics=None) -> float:
    """Channel mean of the per-channel Pearson correlation."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.ndim == 2:
        pred, gt = pred[None], gt[None]
    return float(np.mean([ncc_per_channel(pred[s], gt[s], diagnostics) for s in range(pred.shape[0])]))


# ---------------------------------------------------------------------------
# bicubic resampling (Catmull-Rom, a = -0.5), separable, edge-clamped


def catmull_rom_kernel(t):
    """Cubic convolution weights with a = -0.5; kernel(0)=1, kernel(+-1)=0."""
    t = np.abs(np.asarray(t, dtype=np.float64))
    a = -0.5
    w = np.where(
        t <= 1.0,
        (a + 2.0) * t**3 - (a + 3.0) * t**2 + 1.0,
        np.where(t < 2.0, a * (t**3 - 5.0 * t**2 + 8.0 * t - 4.0), 0.0),
    )
    return w


def _resample_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Dense (n_out, n_in) row-resampling matrix with clamped sample indices."""
    scale = n_out / n_in
    dst = np.arange(n_out, dtype=np.float64)
    src = (dst + 0.5) / scale - 0.5
    base = np.floor(src).astype(np.int64)
    mat = np.zeros((n_out, n_in), dtype=np.float64)
    for tap in range(-1, 3):
        idx = base + tap
        w = catmull_rom_kernel(src - idx)
        np.add.at(mat, (dst.astype(np.int64), np.clip(idx, 0, n_in - 1)), w)
    return mat


def bicubic_resize(img, scale: float) -> np.ndarray:
    """Separable Catmull-Rom resampling of (..., H, W) by a positive factor."""
    if scale <= 0:
        raise UsageError(f"scale must be positive, got {scale}")
    img = np.asarray(img)
    h, w = img.shape[-2], img.shape[-1]
    out_h = int(round(h * scale))
    out_w = int(round(w * scale))
    if out_h < 1 or out_w < 1:
        raise UsageError(f"output dims {out_h}x{out_w} below 1 for scale {scale}")
    mh = _resample_matrix(h, out_h)
    mw = _resample_matrix(w, out_w)
    out = np.einsum("oh,...hw,pw->...op", mh, img.astype(np.float64), mw, optimize=True)
    return out.astype(img.dtype) if img.dtype in (np.float32, np.float64) else out
