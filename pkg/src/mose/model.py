"""Full model assembly: shallow conv embedding, groups of attention+MoE
blocks with residuals, global residual, pixel-shuffle upsampler, and the
pre-upsampler feature tap.

Layout conventions: images travel as (B, C, H, W); inside the transformer
body tokens are (B, H, W, C). Inputs are reflect-padded (bottom/right) to
window multiples and outputs cropped back, so any spatial size is legal.
Residuals are post-norm: x + norm(sublayer(x)).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .attention import (AttentionConfig, WindowAttention, cyclic_shift,
                        cyclic_shift_inverse, shift_attention_mask,
                        window_partition, window_reverse)
from .config import ModelConfig
from .errors import NumericError, UsageError
from .moe import (GateDecision, Mlp, MoeLayer, importance_loss,
                  importance_loss_backward)
from .numerics import ParameterSet, Rng, assert_finite, resolve_dtype
from .ops import (Conv2d, LayerNorm, crop_br, crop_br_backward,
                  pad_br_reflect, pad_br_reflect_backward, pixel_shuffle,
                  pixel_unshuffle)


class S2mlBlock:
    """Attention sublayer plus feed-forward sublayer, both post-norm residual."""

    def __init__(self, pset: ParameterSet, name: str, dim: int,
                 attn_cfg: AttentionConfig, moe_cfg, rng: Rng, dtype):
        self.window = attn_cfg.window_size
        self.shift = attn_cfg.shift
        self.attn = WindowAttention(pset, f"{name}.attn", attn_cfg, rng, dtype)
        self.norm1 = LayerNorm(pset, f"{name}.norm1", dim, dtype)
        if moe_cfg is not None:
            self.ffn = MoeLayer(pset, f"{name}.moe", moe_cfg, rng, dtype)
        else:
            self.ffn = Mlp(pset, f"{name}.mlp", dim, 2 * dim, rng, dtype)
        self.norm2 = LayerNorm(pset, f"{name}.norm2", dim, dtype)

    def forward(self, x, mask):
        B, H, W, C = x.shape
        xs = cyclic_shift(x, self.shift)
        xw = window_partition(xs, self.window)
        yw, c_attn = self.attn.forward(xw, mask if self.shift else None)
        y = cyclic_shift_inverse(window_reverse(yw, self.window, B, H, W), self.shift)
        n1, c_n1 = self.norm1.forward(y)
        x1 = x + n1

        tokens = x1.reshape(B, H * W, C)
        yf, gate, imp, c_ffn = self.ffn.forward(tokens, (H, W))
        n2, c_n2 = self.norm2.forward(yf)
        x2 = x1 + n2.reshape(B, H, W, C)
        return x2, gate, imp, (c_attn, c_n1, c_ffn, c_n2, (B, H, W, C))

    def backward(self, dy, cache, d_importance=None):
        c_attn, c_n1, c_ffn, c_n2, (B, H, W, C) = cache
        dyf = self.norm2.backward(dy.reshape(B, H * W, C), c_n2)
        dtok = self.ffn.backward(dyf, c_ffn, d_importance=d_importance)
        dx1 = dy + dtok.reshape(B, H, W, C)

        dyatt = self.norm1.backward(dx1, c_n1)
        dys = cyclic_shift(dyatt, self.shift)
        dxw = self.attn.backward(window_partition(dys, self.window), c_attn)
        dx_path = cyclic_shift_inverse(window_reverse(dxw, self.window, B, H, W), self.shift)
        return dx1 + dx_path


@dataclass
class ForwardState:
    sr: np.ndarray
    moe_loss: float
    features: np.ndarray  # (B, T, Hp, Wp), pre-upsampler, after global residual
    gates: list
    importances: list
    cache: tuple | None


class Model:
    def __init__(self, cfg: ModelConfig, rng: Rng):
        self.cfg = cfg
        self.dtype = resolve_dtype(cfg.dtype)
        T = cfg.embed_dim
        M = cfg.attention.window_size
        pset = ParameterSet()
        self.shallow = Conv2d(pset, "shallow", cfg.in_channels, T, 3, rng, self.dtype)

        self.blocks: list[list[S2mlBlock]] = []
        self.group_convs: list[Conv2d] = []
        for g in range(cfg.groups):
            row = []
            for b in range(cfg.blocks_per_group):
                attn_cfg = AttentionConfig(
                    channels=T, heads=cfg.attention.heads, window_size=M,
                    pe_rpe=cfg.attention.pe_rpe, pe_logcpb=cfg.attention.pe_logcpb,
                    pe_lepe=cfg.attention.pe_lepe, shift=0 if b % 2 == 0 else M // 2,
                    cosine=cfg.attention.cosine, cpb_hidden=cfg.attention.cpb_hidden)
                row.append(S2mlBlock(pset, f"blocks.{g}.{b}", T, attn_cfg, cfg.moe, rng, self.dtype))
            self.blocks.append(row)
            self.group_convs.append(Conv2d(pset, f"groups.{g}.conv", T, T, 3, rng, self.dtype))

        stages = {2: [2], 3: [3], 4: [2, 2]}[cfg.scale]
        self.upsample = [
            (Conv2d(pset, f"upsample.{i}", T, T * r * r, 3, rng, self.dtype), r)
            for i, r in enumerate(stages)
        ]
        self.head = Conv2d(pset, "head", T, cfg.in_channels, 3, rng, self.dtype)
        self.params = pset
        self._masks: dict[tuple[int, int], np.ndarray] = {}

    # -- helpers ------------------------------------------------------------

    def _mask(self, H, W):
        M = self.cfg.attention.window_size
        if self.cfg.blocks_per_group < 2:
            return None
        key = (H, W)
        if key not in self._masks:
            self._masks[key] = shift_attention_mask(H, W, M, M // 2, self.dtype)
        return self._masks[key]

    def _padded_dims(self, H, W):
        M = self.cfg.attention.window_size
        return math.ceil(H / M) * M, math.ceil(W / M) * M

    def moe_layers(self):
        return [blk for row in self.blocks for blk in row if isinstance(blk.ffn, MoeLayer)]

    # -- forward / backward ---------------------------------------------------

    def forward(self, lr, training: bool = True) -> ForwardState:
        lr = np.asarray(lr)
        if lr.ndim != 4 or lr.shape[1] != self.cfg.in_channels:
            raise UsageError(
                f"expected input (B, {self.cfg.in_channels}, H, W), got {lr.shape}")
        B, _, H, W = lr.shape
        Hp, Wp = self._padded_dims(H, W)
        x_img, c_pad = pad_br_reflect(lr.astype(self.dtype, copy=False), Hp - H, Wp - W)

        f0, c_sh = self.shallow.forward(x_img)
        x = np.ascontiguousarray(f0.transpose(0, 2, 3, 1))
        f0_tokens = x
        mask = self._mask(Hp, Wp)

        block_caches = []
        gates, importances = [], []
        group_caches = []
        for g, (row, conv) in enumerate(zip(self.blocks, self.group_convs)):
            xg = x
            row_caches = []
            for b, blk in enumerate(row):
                x, gate, imp, bc = blk.forward(x, mask)
                assert_finite(x, f"blocks.{g}.{b} output")
                gates.append(gate)
                importances.append(imp)
                row_caches.append(bc if training else None)
            y, cgc = conv.forward(np.ascontiguousarray(x.transpose(0, 3, 1, 2)))
            x = np.ascontiguousarray(y.transpose(0, 2, 3, 1)) + xg
            block_caches.append(row_caches if training else None)
            group_caches.append(cgc if training else None)

        x = x + f0_tokens
        feats = np.ascontiguousarray(x.transpose(0, 3, 1, 2))

        u = feats
        up_caches = []
        for conv, r in self.upsample:
            u, cu = conv.forward(u)
            u = pixel_shuffle(u, r)
            up_caches.append(cu if training else None)
        sr_full, c_head = self.head.forward(u)
        r = self.cfg.scale
        sr = np.ascontiguousarray(crop_br(sr_full, r * H, r * W))
        assert_finite(sr, "sr output")

        layer_losses = [importance_loss(imp) for imp in importances if imp is not None]
        moe_loss = float(np.mean(layer_losses)) if layer_losses else 0.0

        cache = None
        if training:
            cache = (c_pad, c_sh, block_caches, group_caches, up_caches, c_head,
                     (B, H, W, Hp, Wp), f0_tokens.shape)
        return ForwardState(sr=sr, moe_loss=moe_loss, features=feats,
                            gates=gates, importances=importances, cache=cache)

    def backward(self, state: ForwardState, dsr, dmoe: float = 0.0) -> None:
        if state.cache is None:
            raise UsageError("backward needs a forward pass with training=True")
        (c_pad, c_sh, block_caches, group_caches, up_caches, c_head,
         (B, H, W, Hp, Wp), _) = state.cache
        r = self.cfg.scale

        d_imps = [None] * len(state.importances)
        live = [i for i, imp in enumerate(state.importances) if imp is not None]
        if dmoe != 0.0 and live:
            for i in live:
                d_imps[i] = (dmoe / len(live)) * importance_loss_backward(state.importances[i])

        dfull = crop_br_backward(dsr.astype(self.dtype, copy=False), r * Hp, r * Wp)
        du = self.head.backward(dfull, c_head)
        for (conv, ri), cu in zip(reversed(self.upsample), reversed(up_caches)):
            du = pixel_unshuffle(du, ri)
            du = conv.backward(du, cu)

        dx = np.ascontiguousarray(du.transpose(0, 2, 3, 1))
        df0_tokens = dx.copy()

        layer_idx = len(state.importances)
        for g in range(self.cfg.groups - 1, -1, -1):
            dxg_out = dx
            dconv_in = self.group_convs[g].backward(
                np.ascontiguousarray(dxg_out.transpose(0, 3, 1, 2)), group_caches[g])
            dblocks = np.ascontiguousarray(dconv_in.transpose(0, 2, 3, 1))
            for b in range(self.cfg.blocks_per_group - 1, -1, -1):
                layer_idx -= 1
                dblocks = self.blocks[g][b].backward(
                    dblocks, block_caches[g][b], d_importance=d_imps[layer_idx])
            dx = dxg_out + dblocks
        df0_tokens += dx

        self.shallow.backward(
            np.ascontiguousarray(df0_tokens.transpose(0, 3, 1, 2)), c_sh, need_dx=False)

    def extract_features(self, lr) -> np.ndarray:
        """Pre-upsampler deep features (B, T, Hp, Wp) at the window-padded size."""
        return self.forward(lr, training=False).features

    def super_resolve(self, lr) -> np.ndarray:
        return self.forward(lr, training=False).sr

    # -- parameter accounting -------------------------------------------------

    def param_counts(self) -> tuple[int, int]:
        """(active, sparse) scalar counts for the whole model."""
        spc = self.params.total_scalars()
        inactive = 0
        for blk in self.moe_layers():
            cfg = blk.ffn.cfg
            per_expert = 2 * cfg.channels * cfg.expert_hidden + cfg.expert_hidden + cfg.channels
            inactive += (cfg.experts - cfg.active) * per_expert
        return spc - inactive, spc


class Adam:
    """Adam with bias correction; state is part of the checkpoint."""

    def __init__(self, params: ParameterSet, lr: float = 1e-4,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {p.name: np.zeros_like(p.value) for p in params}
        self.v = {p.name: np.zeros_like(p.value) for p in params}

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p in self.params:
            g = p.grad
            m = self.m[p.name]
            v = self.v[p.name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.value -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_entries(self):
        yield "opt.step", np.array([self.t], dtype=np.float32)
        for name in self.m:
            yield f"opt.m.{name}", self.m[name]
        for name in self.v:
            yield f"opt.v.{name}", self.v[name]

    def load_state(self, entries: dict) -> None:
        if "opt.step" not in entries:
            raise UsageError("checkpoint has no optimizer state to resume from")
        self.t = int(round(float(entries["opt.step"][0])))
        for name in self.m:
            self.m[name][...] = entries[f"opt.m.{name}"].astype(self.m[name].dtype)
            self.v[name][...] = entries[f"opt.v.{name}"].astype(self.v[name].dtype)


def train_step(model: Model, lr_batch, hr_batch, adam: Adam, weights=None):
    """One optimization step; returns the loss breakdown dict."""
    from .losses import total_loss_backward, total_loss_forward

    w = weights if weights is not None else model.cfg.loss
    model.params.zero_grads()
    state = model.forward(lr_batch, training=True)
    total, breakdown, lcache = total_loss_forward(
        state.sr, np.asarray(hr_batch, dtype=state.sr.dtype), state.moe_loss, w)
    if not np.isfinite(total):
        raise NumericError(f"non-finite training loss: {breakdown}")
    dpred, dmoe = total_loss_backward(lcache)
    model.backward(state, dpred, dmoe if state.importances and any(
        i is not None for i in state.importances) else 0.0)
    adam.step()
    return breakdown
