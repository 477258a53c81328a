"""Differentiable array primitives.

Every op comes as a forward returning (output, cache) and a matching backward
taking (upstream_grad, cache). Composition is explicit in the callers; the
finite-difference oracle in numerics.grad_check is the source of truth for
all of these. Thin Layer classes at the bottom own Params and accumulate
weight gradients into them.
"""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

from .errors import UsageError
from .numerics import ParameterSet, Rng, trunc_normal_init

# ---------------------------------------------------------------------------
# linear


def linear_forward(x, w, b=None):
    """x (..., Din) @ w (Din, Dout) + b."""
    y = x @ w
    if b is not None:
        y = y + b
    return y, (x, w, b is not None)


def linear_backward(dy, cache):
    x, w, has_b = cache
    dx = dy @ w.T
    x2 = x.reshape(-1, x.shape[-1])
    dy2 = dy.reshape(-1, dy.shape[-1])
    dw = x2.T @ dy2
    db = dy2.sum(axis=0) if has_b else None
    return dx, dw, db


# ---------------------------------------------------------------------------
# conv2d, stride 1, zero padding


def conv2d_forward(x, w, b=None, pad=0):
    """x (B,Cin,H,W) with w (Cout,Cin,kh,kw); zero-padded, stride 1."""
    B, Cin, H, W = x.shape
    Cout, Cin2, kh, kw = w.shape
    if Cin != Cin2:
        raise UsageError(f"conv2d channel mismatch: input {Cin}, kernel {Cin2}")
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    Ho, Wo = H + 2 * pad - kh + 1, W + 2 * pad - kw + 1
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(B * Ho * Wo, Cin * kh * kw)
    y = cols @ w.reshape(Cout, -1).T
    if b is not None:
        y += b
    y = np.ascontiguousarray(y.reshape(B, Ho, Wo, Cout).transpose(0, 3, 1, 2))
    return y, (x, w, pad, b is not None)


def conv2d_backward(dy, cache, need_dx=True):
    x, w, pad, has_b = cache
    B, Cin, H, W = x.shape
    Cout, _, kh, kw = w.shape
    _, _, Ho, Wo = dy.shape
    dy_cols = dy.transpose(0, 2, 3, 1).reshape(B * Ho * Wo, Cout)

    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(B * Ho * Wo, Cin * kh * kw)
    dw = (cols.T @ dy_cols).T.reshape(Cout, Cin, kh, kw)
    db = dy_cols.sum(axis=0) if has_b else None

    dx = None
    if need_dx:
        ph, pw = kh - 1 - pad, kw - 1 - pad
        dyp = np.pad(dy, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
        win2 = sliding_window_view(dyp, (kh, kw), axis=(2, 3))
        cols2 = win2.transpose(0, 2, 3, 1, 4, 5).reshape(B * H * W, Cout * kh * kw)
        wf = w[:, :, ::-1, ::-1].transpose(0, 2, 3, 1).reshape(Cout * kh * kw, Cin)
        dx = np.ascontiguousarray(
            (cols2 @ wf).reshape(B, H, W, Cin).transpose(0, 3, 1, 2)
        )
    return dx, dw, db


# ---------------------------------------------------------------------------
# layer norm over the last axis


def layernorm_forward(x, g, b, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    return xhat * g + b, (xhat, inv, g)


def layernorm_backward(dy, cache):
    xhat, inv, g = cache
    lead = dy.reshape(-1, dy.shape[-1])
    dg = (dy * xhat).reshape(-1, dy.shape[-1]).sum(axis=0)
    db = lead.sum(axis=0)
    dxhat = dy * g
    m1 = dxhat.mean(axis=-1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
    dx = inv * (dxhat - m1 - xhat * m2)
    return dx, dg, db


# ---------------------------------------------------------------------------
# activations / normalizations

_SQRT1_2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu_forward(x):
    cdf = 0.5 * (1.0 + erf(x * _SQRT1_2))
    return x * cdf, (x, cdf)


def gelu_backward(dy, cache):
    x, cdf = cache
    pdf = np.exp(-0.5 * x * x) * _INV_SQRT_2PI
    return dy * (cdf + x * pdf)


def relu_forward(x):
    y = np.maximum(x, 0.0)
    return y, (x > 0.0)


def relu_backward(dy, cache):
    return dy * cache


def softmax_forward(x, axis=-1):
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    return y, y


def softmax_backward(dy, y, axis=-1):
    s = (dy * y).sum(axis=axis, keepdims=True)
    return y * (dy - s)


def l2norm_forward(x, axis=-1, eps=1e-12):
    """x / max(||x||, eps) along axis."""
    n = np.sqrt((x * x).sum(axis=axis, keepdims=True))
    inv = 1.0 / np.maximum(n, eps)
    xhat = x * inv
    return xhat, (xhat, inv, axis)


def l2norm_backward(dy, cache):
    xhat, inv, axis = cache
    s = (dy * xhat).sum(axis=axis, keepdims=True)
    return inv * (dy - xhat * s)


# ---------------------------------------------------------------------------
# pixel shuffle (depth-to-space) and spatial pad/crop


def pixel_shuffle(x, r):
    """(B, C*r*r, H, W) -> (B, C, H*r, W*r); exact value rearrangement."""
    B, Cr2, H, W = x.shape
    if Cr2 % (r * r):
        raise UsageError(f"pixel_shuffle: {Cr2} channels not divisible by r^2={r * r}")
    C = Cr2 // (r * r)
    y = x.reshape(B, C, r, r, H, W).transpose(0, 1, 4, 2, 5, 3).reshape(B, C, H * r, W * r)
    return np.ascontiguousarray(y)


def pixel_unshuffle(y, r):
    """Inverse of pixel_shuffle; also its gradient."""
    B, C, Hr, Wr = y.shape
    if Hr % r or Wr % r:
        raise UsageError(f"pixel_unshuffle: spatial dims {Hr}x{Wr} not divisible by {r}")
    H, W = Hr // r, Wr // r
    x = y.reshape(B, C, H, r, W, r).transpose(0, 1, 3, 5, 2, 4).reshape(B, C * r * r, H, W)
    return np.ascontiguousarray(x)


def _reflect_indices(n, pad_after):
    """Source indices for reflect-padding a length-n axis on the high side."""
    idx = np.arange(n + pad_after)
    if n == 1:
        return np.zeros_like(idx)
    period = 2 * n - 2
    m = idx % period
    return np.where(m < n, m, period - m)


def pad_br_reflect(x, ph, pw):
    """Reflect-pad the bottom/right of (..., H, W); keeps top-left alignment."""
    H, W = x.shape[-2], x.shape[-1]
    rows = _reflect_indices(H, ph)
    cols = _reflect_indices(W, pw)
    y = x[..., rows[:, None], cols[None, :]]
    return np.ascontiguousarray(y), (H, W, rows, cols)


def pad_br_reflect_backward(dy, cache):
    H, W, rows, cols = cache
    lead = dy.shape[:-2]
    n_lead = int(np.prod(lead)) if lead else 1
    dy2 = dy.reshape(n_lead, -1)
    dx2 = np.zeros((n_lead, H * W), dtype=dy.dtype)
    ii = (rows[:, None] * W + cols[None, :]).ravel()
    np.add.at(dx2, (np.arange(n_lead)[:, None], ii[None, :]), dy2)
    return dx2.reshape(lead + (H, W))


def crop_br(x, h, w):
    return x[..., :h, :w]


def crop_br_backward(dy, full_h, full_w):
    lead = dy.shape[:-2]
    dx = np.zeros(lead + (full_h, full_w), dtype=dy.dtype)
    dx[..., : dy.shape[-2], : dy.shape[-1]] = dy
    return dx


# ---------------------------------------------------------------------------
# param-owning layer wrappers


class Linear:
    def __init__(self, pset: ParameterSet, name: str, d_in: int, d_out: int,
                 rng: Rng, dtype, bias: bool = True, init_std: float = 0.02,
                 bias_init_std: float = 0.0):
        self.w = pset.register(f"{name}.weight",
                               trunc_normal_init((d_in, d_out), init_std, rng.child(f"{name}.weight"), dtype))
        if not bias:
            self.b = None
        elif bias_init_std > 0:
            self.b = pset.register(f"{name}.bias",
                                   trunc_normal_init((d_out,), bias_init_std, rng.child(f"{name}.bias"), dtype))
        else:
            self.b = pset.register(f"{name}.bias", np.zeros(d_out, dtype=dtype))

    def forward(self, x):
        return linear_forward(x, self.w.value, None if self.b is None else self.b.value)

    def backward(self, dy, cache):
        dx, dw, db = linear_backward(dy, cache)
        self.w.grad += dw
        if self.b is not None:
            self.b.grad += db
        return dx


class Conv2d:
    def __init__(self, pset: ParameterSet, name: str, c_in: int, c_out: int, k: int,
                 rng: Rng, dtype, pad: int | None = None, init_std: float = 0.02):
        self.pad = k // 2 if pad is None else pad
        self.w = pset.register(f"{name}.weight",
                               trunc_normal_init((c_out, c_in, k, k), init_std, rng.child(f"{name}.weight"), dtype))
        self.b = pset.register(f"{name}.bias", np.zeros(c_out, dtype=dtype))

    def forward(self, x):
        return conv2d_forward(x, self.w.value, self.b.value, pad=self.pad)

    def backward(self, dy, cache, need_dx=True):
        dx, dw, db = conv2d_backward(dy, cache, need_dx=need_dx)
        self.w.grad += dw
        self.b.grad += db
        return dx


class LayerNorm:
    def __init__(self, pset: ParameterSet, name: str, dim: int, dtype, eps: float = 1e-5):
        self.eps = eps
        self.g = pset.register(f"{name}.weight", np.ones(dim, dtype=dtype))
        self.b = pset.register(f"{name}.bias", np.zeros(dim, dtype=dtype))

    def forward(self, x):
        return layernorm_forward(x, self.g.value, self.b.value, eps=self.eps)

    def backward(self, dy, cache):
        dx, dg, db = layernorm_backward(dy, cache)
        self.g.grad += dg
        self.b.grad += db
        return dx
