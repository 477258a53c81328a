import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mose.checkpoint import load_checkpoint, save_checkpoint
from mose.errors import DataError, NumericError, UsageError
from mose.numerics import (ParameterSet, Rng, grad_check, resolve_dtype,
                           trunc_normal_init)


class TestRng:
    def test_same_seed_same_stream(self):
        a = Rng(123).normal((16,))
        b = Rng(123).normal((16,))
        assert np.array_equal(a, b)

    def test_children_are_independent_and_stable(self):
        r = Rng(5)
        a1 = r.child("a").normal((8,))
        b1 = r.child("b").normal((8,))
        a2 = Rng(5).child("a").normal((8,))
        assert np.array_equal(a1, a2)
        assert not np.array_equal(a1, b1)

    def test_child_does_not_depend_on_parent_draws(self):
        r1 = Rng(9)
        r1.normal((100,))  # consume some of the parent stream
        r2 = Rng(9)
        assert np.array_equal(r1.child("x").normal((4,)), r2.child("x").normal((4,)))


class TestTruncNormal:
    def test_bounds(self):
        v = trunc_normal_init((4,), 0.02, Rng(0), "f32")
        assert np.all(np.abs(v) <= 0.04)

    def test_deterministic(self):
        a = trunc_normal_init((128,), 0.02, Rng(7), "f32")
        b = trunc_normal_init((128,), 0.02, Rng(7), "f32")
        assert a.tobytes() == b.tobytes()

    def test_large_sample_mean_near_zero(self):
        # mean of n=1e4 draws has sd <= std/sqrt(n) = std/100; 3 sigma bound
        v = trunc_normal_init((10_000,), 0.02, Rng(1), "f64")
        assert abs(v.mean()) < 3 * 0.02 / 100

    def test_rejects_bad_std(self):
        with pytest.raises(UsageError):
            trunc_normal_init((4,), 0.0, Rng(0))

    @given(st.integers(min_value=0, max_value=2**63 - 1))
    @settings(max_examples=20, deadline=None)
    def test_bounds_hold_for_any_seed(self, seed):
        v = trunc_normal_init((64,), 0.5, Rng(seed), "f64")
        assert np.all(np.abs(v) <= 1.0)


class TestRowMajorConventions:
    def test_flat_offset_formula(self):
        a, b, c = 3, 4, 5
        x = np.arange(a * b * c, dtype=np.float32).reshape(a, b, c)
        for i, j, k in [(0, 0, 0), (1, 2, 3), (2, 3, 4)]:
            assert x[i, j, k] == x.reshape(-1)[i * b * c + j * c + k]

    def test_reshape_preserves_scalar_sequence(self):
        x = Rng(0).normal((6, 10))
        assert np.array_equal(x.reshape(-1), x.reshape(3, 20).reshape(-1))


class TestParameterSet:
    def test_insertion_order_and_uniqueness(self):
        ps = ParameterSet()
        for name in ["w2", "w0", "w1"]:
            ps.register(name, np.zeros(3, dtype=np.float32))
        assert ps.names() == ["w2", "w0", "w1"]
        with pytest.raises(UsageError):
            ps.register("w0", np.zeros(1, dtype=np.float32))

    def test_grad_shape_matches_value(self):
        ps = ParameterSet()
        p = ps.register("w", np.zeros((2, 3), dtype=np.float32))
        assert p.grad.shape == p.value.shape
        assert p.grad.dtype == p.value.dtype

    def test_load_values_checks_shape(self):
        ps = ParameterSet()
        ps.register("w", np.zeros((2, 3), dtype=np.float32))
        with pytest.raises(UsageError):
            ps.load_values({"w": np.zeros((3, 2))})


class TestGradCheck:
    def test_quadratic_is_exact(self):
        ps = ParameterSet()
        p = ps.register("w", Rng(3).normal((5,)))

        def f(params):
            params["w"].grad += 2.0 * params["w"].value
            return float((params["w"].value ** 2).sum())

        report = grad_check(f, ps, eps=1e-5)
        assert report.max_rel_error < 1e-8

    def test_sign_flip_detected(self):
        ps = ParameterSet()
        ps.register("w", np.array([2.0, 3.0]))  # gradients 4, 6: |g| > 1

        def f(params):
            params["w"].grad += -2.0 * params["w"].value  # deliberately wrong sign
            return float((params["w"].value ** 2).sum())

        report = grad_check(f, ps, eps=1e-5)
        assert report.max_rel_error == pytest.approx(2.0, abs=1e-6)

    def test_nonfinite_objective_raises(self):
        ps = ParameterSet()
        ps.register("w", np.ones(2))

        def f(params):
            return float("nan")

        with pytest.raises(NumericError):
            grad_check(f, ps)

    def test_probe_subset_covers_every_param(self):
        ps = ParameterSet()
        ps.register("a", Rng(0).normal((40,)))
        ps.register("b", Rng(1).normal((3,)))

        def f(params):
            total = 0.0
            for p in params:
                p.grad += np.cos(p.value)
                total += float(np.sin(p.value).sum())
            return total

        report = grad_check(f, ps, eps=1e-6, probes_per_param=4)
        assert set(report.per_param) == {"a", "b"}
        assert report.max_rel_error < 1e-8


class TestDtype:
    def test_resolve(self):
        assert resolve_dtype("f32") == np.float32
        assert resolve_dtype(np.float64) == np.float64
        with pytest.raises(UsageError):
            resolve_dtype("f16")


class TestCheckpoint:
    def test_roundtrip_bitwise(self, tmp_path):
        path = str(tmp_path / "ck.msck")
        rng = Rng(4)
        entries = [("layer.w", rng.normal((3, 4)).astype(np.float32)),
                   ("layer.b", rng.normal((4,)).astype(np.float32)),
                   ("opt.step", np.array([17.0], dtype=np.float32))]
        save_checkpoint(path, {"model": {"embed_dim": 8}, "seed": 1}, entries)
        cfg, loaded = load_checkpoint(path)
        assert cfg == {"model": {"embed_dim": 8}, "seed": 1}
        assert list(loaded) == ["layer.w", "layer.b", "opt.step"]
        for name, arr in entries:
            assert loaded[name].tobytes() == arr.tobytes()

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.msck"
        path.write_bytes(b"XXXX" + b"\x00" * 16)
        with pytest.raises(DataError, match="magic"):
            load_checkpoint(str(path))

    def test_truncated_payload(self, tmp_path):
        path = str(tmp_path / "ck.msck")
        save_checkpoint(path, {}, [("w", np.zeros((4, 4), dtype=np.float32))])
        blob = open(path, "rb").read()
        trunc = tmp_path / "trunc.msck"
        trunc.write_bytes(blob[:-8])
        with pytest.raises(DataError, match="truncated"):
            load_checkpoint(str(trunc))
