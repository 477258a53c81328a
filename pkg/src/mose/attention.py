"""Windowed multi-head self-attention with composable positional biases.

Three additive position terms can be enabled independently on top of the
scaled cosine attention kernel:

  * a per-head bias table indexed by relative offset (rpe),
  * a per-head bias produced by a small MLP from log-scaled relative
    coordinates (logcpb),
  * a per-channel additive table over window positions (lepe), applied to
    the projected output.

All routines are pure functions of (input, parameters); caches returned by
forward feed the matching backward.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import UsageError
from .numerics import ParameterSet, Rng, assert_finite, trunc_normal_init
from .ops import (Linear, l2norm_backward, l2norm_forward, relu_backward,
                  relu_forward, softmax_backward, softmax_forward)

MASK_FILL = -100.0


@dataclass(frozen=True)
class AttentionConfig:
    channels: int
    heads: int
    window_size: int
    pe_rpe: bool = True
    pe_logcpb: bool = False
    pe_lepe: bool = True
    shift: int = 0
    cosine: bool = True
    cpb_hidden: int = 256
    tau_init: float = 0.07
    tau_min: float = 0.01

    def __post_init__(self):
        if self.channels % self.heads:
            raise UsageError(f"channels {self.channels} not divisible by heads {self.heads}")
        if self.window_size < 2:
            raise UsageError(f"window_size must be >= 2, got {self.window_size}")
        if self.shift not in (0, self.window_size // 2):
            raise UsageError(f"shift must be 0 or {self.window_size // 2}, got {self.shift}")
        if self.pe_logcpb and self.cpb_hidden < 1:
            raise UsageError("cpb_hidden must be >= 1")


# ---------------------------------------------------------------------------
# window rearrangement


def window_partition(x, window):
    """(B, H, W, C) -> (B * H/M * W/M, M*M, C), windows in raster order."""
    B, H, W, C = x.shape
    if H % window or W % window:
        raise UsageError(f"spatial dims {H}x{W} not divisible by window {window}")
    x = x.reshape(B, H // window, window, W // window, window, C)
    x = x.transpose(0, 1, 3, 2, 4, 5)
    return np.ascontiguousarray(x.reshape(-1, window * window, C))


def window_reverse(xw, window, B, H, W):
    """Exact inverse of window_partition."""
    C = xw.shape[-1]
    x = xw.reshape(B, H // window, W // window, window, window, C)
    x = x.transpose(0, 1, 3, 2, 4, 5)
    return np.ascontiguousarray(x.reshape(B, H, W, C))


def cyclic_shift(x, shift):
    """Toroidal roll of (B, H, W, C) by (-shift, -shift)."""
    if shift == 0:
        return x
    return np.roll(x, (-shift, -shift), axis=(1, 2))


def cyclic_shift_inverse(x, shift):
    if shift == 0:
        return x
    return np.roll(x, (shift, shift), axis=(1, 2))


def relative_position_index(window):
    """(M^2, M^2) indices into the (2M-1)^2 table of relative offsets."""
    coords = np.stack(np.meshgrid(np.arange(window), np.arange(window), indexing="ij"))
    flat = coords.reshape(2, -1)
    rel = flat[:, :, None] - flat[:, None, :] + (window - 1)
    return rel[0] * (2 * window - 1) + rel[1]


def rpe_gather(table, window):
    """Gather the (heads, M^2, M^2) bias matrix from a (2M-1)^2 x heads table."""
    span = (2 * window - 1) ** 2
    if table.shape[0] != span:
        raise UsageError(f"rpe table has {table.shape[0]} rows, expected {span}")
    idx = relative_position_index(window)
    return np.ascontiguousarray(table[idx].transpose(2, 0, 1))


def rpe_scatter(dbias, window, n_rows):
    """Adjoint of rpe_gather: accumulate (heads, M^2, M^2) grads into the table."""
    idx = relative_position_index(window)
    dtable = np.zeros((n_rows, dbias.shape[0]), dtype=dbias.dtype)
    np.add.at(dtable, idx.ravel(), dbias.transpose(1, 2, 0).reshape(-1, dbias.shape[0]))
    return dtable


def logcpb_coords(window, dtype):
    """Log-scaled relative coordinates, sign(d) * log2(1+|d|) / log2(8)."""
    d = np.arange(-(window - 1), window, dtype=np.float64)
    gy, gx = np.meshgrid(d, d, indexing="ij")
    c = np.stack([gy, gx], axis=-1).reshape(-1, 2)
    c = np.sign(c) * np.log2(1.0 + np.abs(c)) / np.log2(8.0)
    return c.astype(dtype)


def shift_attention_mask(H, W, window, shift, dtype):
    """Additive logits mask (nW, M^2, M^2) for shifted-window attention.

    Pairs of positions whose pre-shift image regions differ get MASK_FILL so
    the toroidal roll cannot leak content across the wrap-around seam.
    """
    img = np.zeros((H, W), dtype=np.int64)
    region = 0
    spans = (slice(0, -window), slice(-window, -shift), slice(-shift, None))
    for hs in spans:
        for ws in spans:
            img[hs, ws] = region
            region += 1
    labels = window_partition(img[None, :, :, None].astype(np.float64), window)[:, :, 0]
    diff = labels[:, None, :] - labels[:, :, None]
    return np.where(diff != 0, np.asarray(MASK_FILL, dtype=dtype), np.asarray(0.0, dtype=dtype))


# ---------------------------------------------------------------------------
# attention layer


class WindowAttention:
    """Multi-head attention over windowed tokens (nW, M^2, C)."""

    def __init__(self, pset: ParameterSet, name: str, cfg: AttentionConfig, rng: Rng, dtype):
        self.cfg = cfg
        C, h, M = cfg.channels, cfg.heads, cfg.window_size
        self.head_dim = C // h
        self.qkv = Linear(pset, f"{name}.qkv", C, 3 * C, rng, dtype)
        self.proj = Linear(pset, f"{name}.proj", C, C, rng, dtype)
        self.tau = None
        if cfg.cosine:
            self.tau = pset.register(f"{name}.tau", np.full(h, cfg.tau_init, dtype=dtype))
        self.rpe = None
        if cfg.pe_rpe:
            span = (2 * M - 1) ** 2
            self.rpe = pset.register(
                f"{name}.rpe", trunc_normal_init((span, h), 0.02, rng.child(f"{name}.rpe"), dtype))
        self.lepe = None
        if cfg.pe_lepe:
            self.lepe = pset.register(
                f"{name}.lepe", trunc_normal_init((C, M * M), 0.02, rng.child(f"{name}.lepe"), dtype))
        self.cpb_fc1 = self.cpb_fc2 = None
        if cfg.pe_logcpb:
            # noisy hidden bias keeps the zero relative offset away from the ReLU kink
            self.cpb_fc1 = Linear(pset, f"{name}.cpb.fc1", 2, cfg.cpb_hidden, rng, dtype,
                                  bias_init_std=0.02)
            self.cpb_fc2 = Linear(pset, f"{name}.cpb.fc2", cfg.cpb_hidden, h, rng, dtype)
            self._cpb_coords = logcpb_coords(M, dtype)
        self._rel_idx = relative_position_index(M)

    def _cpb_bias(self):
        """(heads, M^2, M^2) bias through the 2 -> hidden -> heads perceptron."""
        hpre, c1 = self.cpb_fc1.forward(self._cpb_coords)
        hact, crelu = relu_forward(hpre)
        vals, c2 = self.cpb_fc2.forward(hact)
        bias = np.ascontiguousarray(vals[self._rel_idx].transpose(2, 0, 1))
        return bias, (c1, crelu, c2, vals.shape)

    def _cpb_bias_backward(self, dbias, cache):
        c1, crelu, c2, vshape = cache
        dvals = np.zeros(vshape, dtype=dbias.dtype)
        np.add.at(dvals, self._rel_idx.ravel(), dbias.transpose(1, 2, 0).reshape(-1, dbias.shape[0]))
        dhact = self.cpb_fc2.backward(dvals, c2)
        dhpre = relu_backward(dhact, crelu)
        self.cpb_fc1.backward(dhpre, c1)

    def forward(self, xw, mask=None):
        """xw (nW, M^2, C); optional additive mask (nw_img, M^2, M^2)."""
        cfg = self.cfg
        nw, N, C = xw.shape
        h, d, M = cfg.heads, self.head_dim, cfg.window_size
        if N != M * M:
            raise UsageError(f"expected {M * M} tokens per window, got {N}")

        qkv, c_qkv = self.qkv.forward(xw)
        qkv = qkv.reshape(nw, N, 3, h, d).transpose(2, 0, 3, 1, 4)
        q, k, v = (np.ascontiguousarray(qkv[i]) for i in range(3))

        if cfg.cosine:
            qn, cq = l2norm_forward(q)
            kn, ck = l2norm_forward(k)
            tau_eff = np.maximum(self.tau.value, cfg.tau_min)
            scale = (1.0 / tau_eff).reshape(1, h, 1, 1)
            cosm = qn @ kn.swapaxes(-1, -2)
            logits = cosm * scale
            kernel_cache = (qn, kn, cq, ck, cosm, tau_eff)
        else:
            scale = 1.0 / math.sqrt(d)
            logits = (q @ k.swapaxes(-1, -2)) * scale
            kernel_cache = (q, k)

        cpb_cache = None
        if cfg.pe_rpe:
            logits = logits + rpe_gather(self.rpe.value, M)[None]
        if cfg.pe_logcpb:
            cpb_bias, cpb_cache = self._cpb_bias()
            logits = logits + cpb_bias[None]
        if mask is not None:
            nm = mask.shape[0]
            if nw % nm:
                raise UsageError(f"{nw} windows not a multiple of mask windows {nm}")
            logits = (logits.reshape(nw // nm, nm, h, N, N) + mask[None, :, None]).reshape(nw, h, N, N)
        assert_finite(logits, "attention logits")

        attn, _ = softmax_forward(logits)
        ctx = attn @ v
        merged = np.ascontiguousarray(ctx.transpose(0, 2, 1, 3)).reshape(nw, N, C)
        out, c_proj = self.proj.forward(merged)
        if cfg.pe_lepe:
            out = out + self.lepe.value.T[None]

        cache = (c_qkv, kernel_cache, cpb_cache, attn, v, c_proj, (nw, N, h, d))
        return out, cache

    def backward(self, dout, cache):
        cfg = self.cfg
        c_qkv, kernel_cache, cpb_cache, attn, v, c_proj, dims = cache
        nw, N, h, d = dims
        M = cfg.window_size

        if cfg.pe_lepe:
            self.lepe.grad += dout.sum(axis=0).T
        dmerged = self.proj.backward(dout, c_proj)
        dctx = np.ascontiguousarray(dmerged.reshape(nw, N, h, d).transpose(0, 2, 1, 3))
        dattn = dctx @ v.swapaxes(-1, -2)
        dv = attn.swapaxes(-1, -2) @ dctx
        dlogits = softmax_backward(dattn, attn)

        per_head = dlogits.sum(axis=0)
        if cfg.pe_logcpb:
            self._cpb_bias_backward(per_head, cpb_cache)
        if cfg.pe_rpe:
            self.rpe.grad += rpe_scatter(per_head, M, self.rpe.value.shape[0])

        if cfg.cosine:
            qn, kn, cq, ck, cosm, tau_eff = kernel_cache
            scale = (1.0 / tau_eff).reshape(1, h, 1, 1)
            dcos = dlogits * scale
            dscale = (dlogits * cosm).sum(axis=(0, 2, 3))
            dtau = np.where(self.tau.value > cfg.tau_min, -dscale / (tau_eff * tau_eff), 0.0)
            self.tau.grad += dtau.astype(self.tau.grad.dtype)
            dqn = dcos @ kn
            dkn = dcos.swapaxes(-1, -2) @ qn
            dq = l2norm_backward(dqn, cq)
            dk = l2norm_backward(dkn, ck)
        else:
            q, k = kernel_cache
            scale = 1.0 / math.sqrt(d)
            dq = (dlogits @ k) * scale
            dk = (dlogits.swapaxes(-1, -2) @ q) * scale

        dqkv = np.stack([dq, dk, dv])  # (3, nw, h, N, d)
        dqkv = np.ascontiguousarray(dqkv.transpose(1, 3, 0, 2, 4)).reshape(nw, N, 3 * h * d)
        return self.qkv.backward(dqkv, c_qkv)
