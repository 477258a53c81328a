import itertools

import numpy as np
import pytest

from mose.attention import (AttentionConfig, WindowAttention, cyclic_shift,
                            cyclic_shift_inverse, logcpb_coords,
                            relative_position_index, rpe_gather,
                            shift_attention_mask, window_partition,
                            window_reverse)
from mose.errors import UsageError
from mose.numerics import ParameterSet, Rng, grad_check


def make_attn(channels=8, heads=2, window=4, dtype=np.float64, seed=0, **flags):
    cfg = AttentionConfig(channels=channels, heads=heads, window_size=window, **flags)
    pset = ParameterSet()
    attn = WindowAttention(pset, "attn", cfg, Rng(seed).child("attn"), dtype)
    return attn, pset, cfg


class TestWindowing:
    def test_single_window(self):
        x = Rng(0).normal((1, 8, 8, 3))
        xw = window_partition(x, 8)
        assert xw.shape == (1, 64, 3)

    def test_roundtrip_identity(self):
        x = Rng(1).normal((2, 16, 16, 5))
        xw = window_partition(x, 8)
        assert xw.shape == (2 * 4, 64, 5)
        np.testing.assert_array_equal(window_reverse(xw, 8, 2, 16, 16), x)

    def test_constant_input_constant_windows(self):
        x = np.full((1, 16, 8, 2), 3.5)
        xw = window_partition(x, 8)
        assert np.all(xw == 3.5)

    def test_indivisible_raises(self):
        with pytest.raises(UsageError):
            window_partition(np.zeros((1, 9, 8, 1)), 8)

    def test_raster_order(self):
        # window (0,1) of a 8x16 image must hold columns 8..15
        x = np.arange(8 * 16, dtype=np.float64).reshape(1, 8, 16, 1)
        xw = window_partition(x, 8)
        np.testing.assert_array_equal(xw[1, :, 0], x[0, :, 8:, 0].reshape(-1))


class TestCyclicShift:
    def test_zero_shift_identity(self):
        x = Rng(2).normal((1, 8, 8, 2))
        assert cyclic_shift(x, 0) is x

    def test_inverse_exact(self):
        x = Rng(3).normal((2, 16, 16, 3))
        np.testing.assert_array_equal(cyclic_shift_inverse(cyclic_shift(x, 3), 3), x)

    def test_sum_preserved(self):
        x = Rng(4).normal((1, 8, 8, 4))
        assert cyclic_shift(x, 4).sum() == pytest.approx(x.sum(), rel=1e-12)


class TestRpe:
    def test_m2_has_nine_offsets(self):
        idx = relative_position_index(2)
        assert idx.shape == (4, 4)
        assert len(np.unique(idx)) == 9

    def test_constant_table_constant_bias(self):
        table = np.full((9, 3), 0.7)
        bias = rpe_gather(table, 2)
        assert bias.shape == (3, 4, 4)
        assert np.all(bias == 0.7)

    def test_equal_offsets_share_entries(self):
        M = 4
        table = Rng(5).normal(((2 * M - 1) ** 2, 2))
        bias = rpe_gather(table, M)
        pos = [(i, j) for i in range(M) for j in range(M)]
        by_offset = {}
        for a, b in itertools.product(range(M * M), repeat=2):
            off = (pos[a][0] - pos[b][0], pos[a][1] - pos[b][1])
            by_offset.setdefault(off, set()).add(float(bias[0, a, b]))
        assert all(len(vals) == 1 for vals in by_offset.values())

    def test_swap_with_negated_offset_is_symmetric(self):
        # entry (i, j) uses offset d and entry (j, i) uses -d: their table
        # coordinates must mirror around the center of the (2M-1) grid
        M = 3
        idx = relative_position_index(M)
        span = 2 * M - 1
        # entry (i, j) uses offset o; entry (j, i) uses the negated offset
        o = np.stack(np.divmod(idx, span))
        ot = np.stack(np.divmod(idx.T, span))
        np.testing.assert_array_equal(o[0] + ot[0], np.full_like(idx, 2 * (M - 1)))
        np.testing.assert_array_equal(o[1] + ot[1], np.full_like(idx, 2 * (M - 1)))


class TestLogCpb:
    def test_coords_sign_log_symmetry(self):
        M = 5
        c = logcpb_coords(M, np.float64).reshape(2 * M - 1, 2 * M - 1, 2)
        d = 3
        plus = c[(M - 1) + d, M - 1]
        minus = c[(M - 1) - d, M - 1]
        assert plus[0] == pytest.approx(-minus[0])
        assert plus[0] == pytest.approx(np.log2(1 + d) / np.log2(8))

    def test_zero_net_zero_bias(self):
        attn, pset, _ = make_attn(pe_rpe=False, pe_logcpb=True, pe_lepe=False, cpb_hidden=4)
        for name in ("attn.cpb.fc1.weight", "attn.cpb.fc1.bias",
                     "attn.cpb.fc2.weight", "attn.cpb.fc2.bias"):
            pset[name].value[...] = 0.0
        bias, _ = attn._cpb_bias()
        assert np.all(bias == 0.0)

    def test_bias_shape(self):
        attn, _, _ = make_attn(channels=12, heads=3, window=8,
                               pe_logcpb=True, pe_rpe=False, pe_lepe=False, cpb_hidden=5)
        bias, _ = attn._cpb_bias()
        assert bias.shape == (3, 64, 64)


class TestWindowAttention:
    def test_uniform_softmax_gives_window_mean(self):
        # zero q/k projections -> flat logits -> every token gets the V mean
        attn, pset, _ = make_attn(pe_rpe=False, pe_logcpb=False, pe_lepe=False)
        C = 8
        w = np.zeros((C, 3 * C))
        w[:, 2 * C:] = np.eye(C)  # v = x
        pset["attn.qkv.weight"].value[...] = w
        pset["attn.qkv.bias"].value[...] = 0.0
        pset["attn.proj.weight"].value[...] = np.eye(C)
        pset["attn.proj.bias"].value[...] = 0.0
        x = Rng(6).normal((3, 16, C))
        y, _ = attn.forward(x)
        np.testing.assert_allclose(y, np.broadcast_to(x.mean(axis=1, keepdims=True), x.shape),
                                   atol=1e-10)

    def test_constant_window_fixed_point_with_identity_v(self):
        attn, pset, _ = make_attn(pe_rpe=False, pe_logcpb=False, pe_lepe=False)
        C = 8
        w = np.zeros((C, 3 * C))
        w[:, :C] = np.eye(C)
        w[:, C:2 * C] = np.eye(C)
        w[:, 2 * C:] = np.eye(C)
        pset["attn.qkv.weight"].value[...] = w
        pset["attn.proj.weight"].value[...] = np.eye(C)
        x = np.tile(Rng(7).normal((1, 1, C)), (2, 16, 1))
        y, _ = attn.forward(x)
        np.testing.assert_allclose(y, x, atol=1e-10)

    def test_zero_lepe_bitwise_identity(self):
        x = Rng(8).normal((2, 16, 8))
        attn_on, pset_on, _ = make_attn(seed=9, pe_rpe=True, pe_logcpb=False, pe_lepe=True)
        attn_off, pset_off, _ = make_attn(seed=9, pe_rpe=True, pe_logcpb=False, pe_lepe=False)
        pset_on["attn.lepe"].value[...] = 0.0
        for name in ("attn.qkv.weight", "attn.qkv.bias", "attn.proj.weight",
                     "attn.proj.bias", "attn.tau", "attn.rpe"):
            pset_off[name].value[...] = pset_on[name].value
        y_on, _ = attn_on.forward(x)
        y_off, _ = attn_off.forward(x)
        assert y_on.tobytes() == y_off.tobytes()

    def test_zero_cpb_bitwise_identity(self):
        x = Rng(10).normal((2, 16, 8))
        attn_on, pset_on, _ = make_attn(seed=11, pe_rpe=False, pe_logcpb=True,
                                        pe_lepe=False, cpb_hidden=4)
        attn_off, pset_off, _ = make_attn(seed=11, pe_rpe=False, pe_logcpb=False, pe_lepe=False)
        for name in ("attn.cpb.fc1.weight", "attn.cpb.fc1.bias",
                     "attn.cpb.fc2.weight", "attn.cpb.fc2.bias"):
            pset_on[name].value[...] = 0.0
        for name in ("attn.qkv.weight", "attn.qkv.bias", "attn.proj.weight",
                     "attn.proj.bias", "attn.tau"):
            pset_off[name].value[...] = pset_on[name].value
        y_on, _ = attn_on.forward(x)
        y_off, _ = attn_off.forward(x)
        assert y_on.tobytes() == y_off.tobytes()

    def test_permutation_equivariance_without_pe(self):
        attn, _, _ = make_attn(seed=12, pe_rpe=False, pe_logcpb=False, pe_lepe=False)
        x = Rng(13).normal((2, 16, 8))
        perm = Rng(14).permutation(16)
        y, _ = attn.forward(x)
        y_perm, _ = attn.forward(x[:, perm, :])
        np.testing.assert_allclose(y_perm, y[:, perm, :], atol=1e-6)

    def test_rpe_breaks_permutation_equivariance(self):
        attn, pset, _ = make_attn(seed=15, pe_rpe=True, pe_logcpb=False, pe_lepe=False)
        pset["attn.rpe"].value[...] = Rng(15).child("big").normal(pset["attn.rpe"].value.shape)
        x = Rng(16).normal((1, 16, 8))
        perm = Rng(17).permutation(16)
        y, _ = attn.forward(x)
        y_perm, _ = attn.forward(x[:, perm, :])
        assert np.abs(y_perm - y[:, perm, :]).max() > 1e-4

    def test_attention_rows_sum_to_one(self):
        attn, _, _ = make_attn(seed=18, pe_rpe=True, pe_logcpb=True, pe_lepe=True, cpb_hidden=4)
        x = Rng(19).normal((3, 16, 8))
        _, cache = attn.forward(x)
        probs = cache[3]
        np.testing.assert_allclose(probs.sum(axis=-1), 1.0, atol=1e-6)

    def test_mask_blocks_cross_region_attention(self):
        attn, _, _ = make_attn(seed=20, pe_rpe=False, pe_logcpb=False, pe_lepe=False)
        x = Rng(21).normal((2, 16, 8))
        mask = np.zeros((2, 16, 16))
        mask[:, :8, 8:] = -100.0
        mask[:, 8:, :8] = -100.0
        _, cache = attn.forward(x, mask)
        probs = cache[3]
        assert probs[:, :, :8, 8:].max() < 1e-6
        assert probs[:, :, 8:, :8].max() < 1e-6

    def test_full_grad_check(self):
        attn, pset, _ = make_attn(seed=22, pe_rpe=True, pe_logcpb=True, pe_lepe=True,
                                  cpb_hidden=4)
        x = Rng(23).normal((2, 16, 8))
        tgt = Rng(24).normal((2, 16, 8))

        def f(params):
            params.zero_grads()
            y, cache = attn.forward(x)
            attn.backward(2.0 * (y - tgt), cache)
            return float(((y - tgt) ** 2).sum())

        report = grad_check(f, pset, eps=1e-6)
        assert report.max_rel_error < 1e-5, report.worst_param

    def test_dot_product_kernel_grad_check(self):
        attn, pset, _ = make_attn(seed=25, cosine=False,
                                  pe_rpe=True, pe_logcpb=False, pe_lepe=True)
        x = Rng(26).normal((2, 16, 8))
        tgt = Rng(27).normal((2, 16, 8))

        def f(params):
            params.zero_grads()
            y, cache = attn.forward(x)
            attn.backward(2.0 * (y - tgt), cache)
            return float(((y - tgt) ** 2).sum())

        assert grad_check(f, pset, eps=1e-6).max_rel_error < 1e-5


class TestShiftMask:
    def test_mask_shape_and_values(self):
        mask = shift_attention_mask(16, 16, 8, 4, np.float32)
        assert mask.shape == (4, 64, 64)
        assert set(np.unique(mask)) <= {-100.0, 0.0}
        # the first window covers interior content only: nothing masked
        assert np.all(mask[0] == 0.0)

    def test_single_window_mask_splits_regions(self):
        mask = shift_attention_mask(8, 8, 8, 4, np.float64)
        assert mask.shape == (1, 64, 64)
        assert (mask == -100.0).any()
