"""Training objective: NCC loss, SSIM loss, MSE (ablation), weighted total.

NCC is the Pearson correlation of flattened channels; its loss maps the
channel mean through 1 - (ncc + 1)/2 into [0, 1]. SSIM uses an 11x11
circular-symmetric Gaussian window (sigma 1.5, weights summing to 1) with
valid-region statistics: no padding, the mean runs over positions where the
window fits entirely. Inputs are (S, H, W) channel stacks; any extra leading
dims are folded into the channel axis, so a batch contributes B*S channels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DataError, NumericError, UsageError

NCC_EPS = 1e-8


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 1.0  # NCC
    beta: float = 1.0   # SSIM
    gamma: float = 0.1  # MoE balance

    def __post_init__(self):
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise UsageError("loss weights must be non-negative")


@dataclass(frozen=True)
class SsimParams:
    window: int = 11
    sigma: float = 1.5
    c1: float = 0.01**2
    c2: float = 0.03**2
    c3: float = 0.03**2 / 2
    delta: float = 1.0
    epsilon: float = 1.0
    eta: float = 1.0

    def __post_init__(self):
        if min(self.c1, self.c2, self.c3) <= 0:
            raise UsageError("SSIM stability constants must be positive")

    @property
    def fused(self) -> bool:
        return self.delta == self.epsilon == self.eta == 1.0 and self.c3 == self.c2 / 2


def _as_channels(x):
    x = np.asarray(x)
    if x.ndim < 2:
        raise UsageError(f"expected at least 2 dims, got shape {x.shape}")
    if x.ndim == 2:
        x = x[None]
    return x.reshape(-1, x.shape[-2], x.shape[-1])


def _check_same_shape(pred, gt):
    if pred.shape != gt.shape:
        raise UsageError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")


# ---------------------------------------------------------------------------
# NCC


def ncc_per_channel(pred, gt, diagnostics=None):
    """Pearson correlation of two flattened images, epsilon-guarded.

    A constant image has zero variance; the +1e-8 denominator guard then
    yields a correlation near 0 instead of a division error. Such cases bump
    diagnostics['ncc_zero_variance'] when a dict is supplied.
    """
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    _check_same_shape(pred, gt)
    if pred.size < 2:
        raise UsageError("NCC needs at least 2 pixels")
    a = pred.reshape(-1)
    b = gt.reshape(-1)
    ac = a - a.mean()
    bc = b - b.mean()
    sa = float(ac @ ac)
    sb = float(bc @ bc)
    den0 = np.sqrt(sa * sb)
    if diagnostics is not None and (sa == 0.0 or sb == 0.0):
        diagnostics["ncc_zero_variance"] = diagnostics.get("ncc_zero_variance", 0) + 1
    return float(ac @ bc) / (den0 + NCC_EPS)


def ncc_loss_forward(pred, gt):
    """1 - (mean channel NCC + 1)/2; returns (loss, cache)."""
    p = _as_channels(pred)
    g = _as_channels(gt)
    _check_same_shape(p, g)
    S = p.shape[0]
    ac = p.reshape(S, -1) - p.reshape(S, -1).mean(axis=1, keepdims=True)
    bc = g.reshape(S, -1) - g.reshape(S, -1).mean(axis=1, keepdims=True)
    sa = (ac * ac).sum(axis=1)
    sb = (bc * bc).sum(axis=1)
    num = (ac * bc).sum(axis=1)
    den0 = np.sqrt(sa * sb)
    r = num / (den0 + NCC_EPS)
    loss = 1.0 - 0.5 * (r.mean() + 1.0)
    cache = (pred.shape, ac, bc, sa, sb, num, den0)
    return float(loss), cache


def ncc_loss_backward(cache, dloss=1.0):
    shape, ac, bc, sa, sb, num, den0 = cache
    S = ac.shape[0]
    dr = -0.5 * dloss / S  # d loss / d r_s
    den = den0 + NCC_EPS
    den0_safe = np.maximum(den0, 1e-300)
    # r = num / den; d num/d a = bc (means drop out), d den0/d a = sb * ac / den0
    da = dr * (bc / den[:, None] - (num * sb / (den0_safe * den * den))[:, None] * ac)
    return da.reshape(shape)


# ---------------------------------------------------------------------------
# SSIM


def gaussian_window(size: int = 11, sigma: float = 1.5):
    """1D Gaussian taps; the 2D window is the normalized outer product."""
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return g / g.sum()


def _filter_valid(x, g):
    """Separable valid-region correlation of (..., H, W) with outer(g, g)."""
    v = sliding_window_view(x, len(g), axis=-1) @ g
    v = sliding_window_view(v, len(g), axis=-2) @ g
    return v


def _filter_valid_adjoint(dz, g, pad):
    """Adjoint of _filter_valid: zero-pad then correlate with the flipped taps."""
    gr = np.ascontiguousarray(g[::-1])
    z = np.pad(dz, [(0, 0)] * (dz.ndim - 2) + [(pad, pad), (pad, pad)])
    v = sliding_window_view(z, len(gr), axis=-1) @ gr
    v = sliding_window_view(v, len(gr), axis=-2) @ gr
    return v


def _ssim_stats(x, y, g):
    ux = _filter_valid(x, g)
    uy = _filter_valid(y, g)
    fxx = _filter_valid(x * x, g)
    fyy = _filter_valid(y * y, g)
    fxy = _filter_valid(x * y, g)
    sxx = fxx - ux * ux
    syy = fyy - uy * uy
    sxy = fxy - ux * uy
    return ux, uy, sxx, syy, sxy


def ssim_per_channel(pred, gt, params: SsimParams = SsimParams()):
    """Mean local SSIM index of one channel under the Gaussian window."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    _check_same_shape(pred, gt)
    if pred.shape[-2] < params.window or pred.shape[-1] < params.window:
        raise DataError(
            f"image {pred.shape[-2]}x{pred.shape[-1]} smaller than the "
            f"{params.window}x{params.window} SSIM window")
    g = gaussian_window(params.window, params.sigma).astype(np.result_type(pred.dtype, np.float32))
    ux, uy, sxx, syy, sxy = _ssim_stats(pred, gt, g)
    if params.fused:
        s = ((2 * ux * uy + params.c1) * (2 * sxy + params.c2)) / (
            (ux * ux + uy * uy + params.c1) * (sxx + syy + params.c2))
    else:
        sx = np.sqrt(np.maximum(sxx, 0.0))
        sy = np.sqrt(np.maximum(syy, 0.0))
        lum = (2 * ux * uy + params.c1) / (ux * ux + uy * uy + params.c1)
        con = (2 * sx * sy + params.c2) / (sxx + syy + params.c2)
        stru = (sxy + params.c3) / (sx * sy + params.c3)
        with np.errstate(invalid="raise"):
            try:
                s = lum**params.delta * con**params.epsilon * stru**params.eta
            except FloatingPointError as exc:
                raise NumericError(f"invalid SSIM exponentiation: {exc}") from exc
    return float(s.mean())


def ssim_loss_forward(pred, gt, params: SsimParams = SsimParams()):
    """Channel mean of (1 - SSIM_s); returns (loss, cache). Default exponents only."""
    if not params.fused:
        raise UsageError("ssim loss gradients support only delta=epsilon=eta=1, c3=c2/2")
    p = _as_channels(pred)
    q = _as_channels(gt)
    _check_same_shape(p, q)
    if p.shape[-2] < params.window or p.shape[-1] < params.window:
        raise DataError(
            f"image {p.shape[-2]}x{p.shape[-1]} smaller than the "
            f"{params.window}x{params.window} SSIM window")
    g = gaussian_window(params.window, params.sigma).astype(np.result_type(p.dtype, np.float32))
    ux, uy, sxx, syy, sxy = _ssim_stats(p, q, g)
    a1 = 2 * ux * uy + params.c1
    a2 = 2 * sxy + params.c2
    b1 = ux * ux + uy * uy + params.c1
    b2 = sxx + syy + params.c2
    smap = (a1 * a2) / (b1 * b2)
    per_channel = smap.mean(axis=(-2, -1))
    loss = float((1.0 - per_channel).mean())
    cache = (pred.shape, p, q, g, ux, uy, sxx, sxy, a1, a2, b1, b2)
    return loss, cache


def ssim_loss_backward(cache, dloss=1.0):
    shape, p, q, g, ux, uy, sxx, sxy, a1, a2, b1, b2 = cache
    S = p.shape[0]
    positions = a1.shape[-2] * a1.shape[-1]
    ds = np.full_like(a1, -dloss / (S * positions))
    b1b2 = b1 * b2
    da1 = ds * a2 / b1b2
    da2 = ds * a1 / b1b2
    db1 = -ds * a1 * a2 / (b1 * b1b2)
    db2 = -ds * a1 * a2 / (b2 * b1b2)
    d_ux = da1 * 2 * uy + db1 * 2 * ux
    d_sxy = da2 * 2
    d_sxx = db2
    # stats -> raw filter outputs: sxx = G*(x^2) - ux^2, sxy = G*(xy) - ux*uy
    d_fxx = d_sxx
    d_fxy = d_sxy
    d_ux = d_ux - 2 * ux * d_sxx - uy * d_sxy
    pad = len(g) - 1
    dp = (_filter_valid_adjoint(d_ux, g, pad)
          + _filter_valid_adjoint(d_fxx, g, pad) * 2 * p
          + _filter_valid_adjoint(d_fxy, g, pad) * q)
    return dp.reshape(shape)


def ssim_loss(pred, gt, params: SsimParams = SsimParams()):
    loss, _ = ssim_loss_forward(pred, gt, params)
    return loss


def ncc_loss(pred, gt):
    loss, _ = ncc_loss_forward(pred, gt)
    return loss


# ---------------------------------------------------------------------------
# MSE and the weighted total


def mse_loss_forward(pred, gt):
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    _check_same_shape(pred, gt)
    diff = pred - gt
    return float((diff * diff).mean()), (diff,)


def mse_loss_backward(cache, dloss=1.0):
    (diff,) = cache
    return (2.0 * dloss / diff.size) * diff


def mse_loss(pred, gt):
    loss, _ = mse_loss_forward(pred, gt)
    return loss


def total_loss_forward(pred, gt, moe_loss: float, weights: LossWeights,
                       ssim_params: SsimParams = SsimParams()):
    """alpha*L_NCC + beta*L_SSIM + gamma*L_MoE with a per-term breakdown."""
    l_ncc, c_ncc = ncc_loss_forward(pred, gt)
    l_ssim, c_ssim = ssim_loss_forward(pred, gt, ssim_params)
    total = weights.alpha * l_ncc + weights.beta * l_ssim + weights.gamma * float(moe_loss)
    if not np.isfinite(total):
        raise NumericError(
            f"non-finite loss: ncc={l_ncc} ssim={l_ssim} moe={moe_loss}")
    breakdown = {"l_total": float(total), "l_ncc": l_ncc, "l_ssim": l_ssim,
                 "l_moe": float(moe_loss)}
    return float(total), breakdown, (weights, c_ncc, c_ssim)


def total_loss_backward(cache):
    """Returns (d pred, d moe_loss)."""
    weights, c_ncc, c_ssim = cache
    dpred = ncc_loss_backward(c_ncc, weights.alpha) + ssim_loss_backward(c_ssim, weights.beta)
    return dpred, weights.gamma
