"""Sparsely-gated mixture of experts with per-example routing.

Each example in a batch is routed as a whole: the gate scores the mean token,
keeps the top-k experts, and softmaxes the surviving logits. Every selected
expert processes all tokens of the example; its output is scaled by the gate
weight before the merge. The merge is either a classic sum or the "smart
merger": a shared 3x3 conv that mixes the k gated expert maps per feature
channel (k input channels -> 1 output channel, 9k+1 parameters).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericError, UsageError
from .numerics import ParameterSet, Rng, assert_finite, trunc_normal_init
from .ops import Linear, conv2d_backward, conv2d_forward, gelu_backward, gelu_forward, softmax_backward, softmax_forward


@dataclass(frozen=True)
class MoeConfig:
    experts: int
    active: int
    channels: int
    hidden: int | None = None  # None -> channels (half the dense-MLP parameter budget)
    smart_merger: bool = True

    def __post_init__(self):
        if not (1 <= self.active <= self.experts):
            raise UsageError(f"need 1 <= active <= experts, got {self.active}/{self.experts}")
        if self.hidden is not None and self.hidden < 1:
            raise UsageError("expert hidden width must be >= 1")

    @property
    def expert_hidden(self) -> int:
        return self.channels if self.hidden is None else self.hidden


@dataclass
class GateDecision:
    """Routing result: expert ids and softmaxed weights, one row per example.

    Indices are unique per row and sorted by descending weight; weights are
    strictly positive and sum to 1.
    """

    indices: np.ndarray  # (B, k) int64
    weights: np.ndarray  # (B, k)


def gate_topk(x_pooled, w_g, k):
    """Top-k gate: logits = x_pooled @ w_g, softmax over the survivors.

    Ties break toward the lower expert index. Returns the decision plus the
    cache needed to backpropagate into the kept logits.
    """
    if k > w_g.shape[1]:
        raise UsageError(f"k={k} exceeds expert count {w_g.shape[1]}")
    logits = x_pooled @ w_g
    assert_finite(logits, "gate logits")
    order = np.argsort(-logits, axis=1, kind="stable")[:, :k]
    kept = np.take_along_axis(logits, order, axis=1)
    weights, _ = softmax_forward(kept)
    return GateDecision(indices=order.astype(np.int64), weights=weights), (x_pooled, weights)


def importance_loss(importance):
    """Squared coefficient of variation: population variance over squared mean."""
    importance = np.asarray(importance)
    if not np.any(importance > 0):
        raise NumericError("importance is all-zero (empty batch?)")
    mean = importance.mean()
    var = ((importance - mean) ** 2).mean()
    return float(var / (mean * mean))


def importance_loss_backward(importance, dloss=1.0):
    importance = np.asarray(importance)
    n = importance.size
    mean = importance.mean()
    var = ((importance - mean) ** 2).mean()
    dvar = dloss / (mean * mean)
    dmean = -2.0 * dloss * var / mean**3
    return dvar * 2.0 * (importance - mean) / n + dmean / n


def moe_param_count(cfg: MoeConfig) -> tuple[int, int]:
    """(active, sparse) parameter counts of one MoE layer, gate included."""
    c, h = cfg.channels, cfg.expert_hidden
    per_expert = 2 * c * h + h + c
    gate = c * cfg.experts
    merger = 9 * cfg.active + 1 if cfg.smart_merger else 0
    apc = cfg.active * per_expert + gate + merger
    spc = cfg.experts * per_expert + gate + merger
    return apc, spc


def mlp_param_count(channels: int, hidden: int) -> int:
    """Parameter count of the dense 2-layer MLP baseline."""
    return channels * hidden + hidden + hidden * channels + channels


class Mlp:
    """Dense 2-layer token MLP (baseline feed-forward)."""

    def __init__(self, pset: ParameterSet, name: str, channels: int, hidden: int, rng: Rng, dtype):
        self.fc1 = Linear(pset, f"{name}.fc1", channels, hidden, rng, dtype)
        self.fc2 = Linear(pset, f"{name}.fc2", hidden, channels, rng, dtype)

    def forward(self, x, hw=None):
        h, c1 = self.fc1.forward(x)
        a, cg = gelu_forward(h)
        y, c2 = self.fc2.forward(a)
        return y, None, None, (c1, cg, c2)

    def backward(self, dy, cache, d_importance=None):
        c1, cg, c2 = cache
        da = self.fc2.backward(dy, c2)
        dh = gelu_backward(da, cg)
        return self.fc1.backward(dh, c1)

    def param_counts(self):
        n = sum(p.value.size for p in (self.fc1.w, self.fc1.b, self.fc2.w, self.fc2.b))
        return n, n


class MoeLayer:
    """MoE feed-forward with optional smart-merger fusion."""

    def __init__(self, pset: ParameterSet, name: str, cfg: MoeConfig, rng: Rng, dtype):
        self.cfg = cfg
        c, h = cfg.channels, cfg.expert_hidden
        self.gate = pset.register(
            f"{name}.gate", trunc_normal_init((c, cfg.experts), 0.02, rng.child(f"{name}.gate"), dtype))
        self.experts = []
        for e in range(cfg.experts):
            fc1 = Linear(pset, f"{name}.experts.{e}.fc1", c, h, rng, dtype)
            fc2 = Linear(pset, f"{name}.experts.{e}.fc2", h, c, rng, dtype)
            self.experts.append((fc1, fc2))
        self.sm_w = self.sm_b = None
        if cfg.smart_merger:
            k = cfg.active
            kernel = np.zeros((1, k, 3, 3), dtype=dtype)
            kernel[0, :, 1, 1] = 1.0 / k  # start as the classic mean of gated experts
            self.sm_w = pset.register(f"{name}.sm.weight", kernel)
            self.sm_b = pset.register(f"{name}.sm.bias", np.zeros(1, dtype=dtype))

    def _run_expert(self, e, x):
        fc1, fc2 = self.experts[e]
        h, c1 = fc1.forward(x)
        a, cg = gelu_forward(h)
        y, c2 = fc2.forward(a)
        return y, (c1, cg, c2)

    def forward(self, x, hw):
        """x (B, N, C) tokens with N == H*W; returns (y, decision, importance, cache)."""
        cfg = self.cfg
        B, N, C = x.shape
        H, W = hw
        if N != H * W:
            raise UsageError(f"token count {N} != H*W = {H * W}")
        k = cfg.active

        pooled = x.mean(axis=1)
        decision, gate_cache = gate_topk(pooled, self.gate.value, k)

        raw = np.empty((B, k, N, C), dtype=x.dtype)
        expert_caches = {}
        for e in range(cfg.experts):
            rows, slots = np.nonzero(decision.indices == e)
            if rows.size == 0:
                continue
            y, cache = self._run_expert(e, x[rows])
            raw[rows, slots] = y
            expert_caches[e] = (rows, slots, cache)
        scaled = raw * decision.weights[:, :, None, None]

        if cfg.smart_merger:
            maps = np.ascontiguousarray(scaled.transpose(0, 3, 1, 2)).reshape(B * C, k, H, W)
            out, c_conv = conv2d_forward(maps, self.sm_w.value, self.sm_b.value, pad=1)
            y = np.ascontiguousarray(out.reshape(B, C, N).transpose(0, 2, 1))
        else:
            c_conv = None
            y = scaled.sum(axis=1)

        importance = np.zeros(cfg.experts, dtype=x.dtype)
        np.add.at(importance, decision.indices.ravel(), decision.weights.ravel())

        cache = (x.shape, hw, decision, gate_cache, raw, expert_caches, c_conv)
        return y, decision, importance, cache

    def backward(self, dy, cache, d_importance=None):
        """dy (B, N, C); d_importance (E,) from the balance loss, optional."""
        cfg = self.cfg
        (B, N, C), (H, W), decision, gate_cache, raw, expert_caches, c_conv = cache
        k = cfg.active

        if cfg.smart_merger:
            dmaps = np.ascontiguousarray(dy.transpose(0, 2, 1)).reshape(B * C, 1, H, W)
            dcols, dw, db = conv2d_backward(dmaps, c_conv, need_dx=True)
            self.sm_w.grad += dw
            self.sm_b.grad += db
            dscaled = np.ascontiguousarray(
                dcols.reshape(B, C, k, N).transpose(0, 2, 3, 1))
        else:
            dscaled = np.broadcast_to(dy[:, None], (B, k, N, C)).copy()

        dweights = (dscaled * raw).sum(axis=(2, 3))
        draw = dscaled * decision.weights[:, :, None, None]

        dx = np.zeros((B, N, C), dtype=dy.dtype)
        for e, (rows, slots, (c1, cg, c2)) in expert_caches.items():
            fc1, fc2 = self.experts[e]
            da = fc2.backward(draw[rows, slots], c2)
            dh = gelu_backward(da, cg)
            np.add.at(dx, rows, fc1.backward(dh, c1))

        if d_importance is not None:
            dweights = dweights + d_importance[decision.indices]

        pooled, weights = gate_cache
        dkept = softmax_backward(dweights, weights)
        dlogits = np.zeros((B, cfg.experts), dtype=dy.dtype)
        np.put_along_axis(dlogits, decision.indices, dkept, axis=1)
        self.gate.grad += pooled.T @ dlogits
        dpooled = dlogits @ self.gate.value.T
        dx += dpooled[:, None, :] / N
        return dx

    def param_counts(self):
        return moe_param_count(self.cfg)
