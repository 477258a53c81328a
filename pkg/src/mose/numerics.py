"""Array conventions, parameter registry, deterministic RNG, gradient checking.

Values are plain numpy ndarrays in C (row-major) order: element (i, j, k) of a
shape-(A, B, C) array lives at flat offset i*B*C + j*C + k, and reshape never
reorders scalars. float32 is the training dtype; float64 is required for
reference gradient checks. A Param pairs a value array with its gradient
accumulator; ParameterSet is the insertion-ordered registry that checkpoints
and the optimizer iterate over.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np

from .errors import NumericError, UsageError

DTYPES = {"f32": np.float32, "f64": np.float64}
DTYPE_NAMES = {np.dtype(np.float32): "f32", np.dtype(np.float64): "f64"}


def resolve_dtype(dtype) -> np.dtype:
    """Accept 'f32'/'f64' or an equivalent numpy dtype; reject anything else."""
    if isinstance(dtype, str):
        if dtype not in DTYPES:
            raise UsageError(f"unsupported dtype {dtype!r}; expected 'f32' or 'f64'")
        return np.dtype(DTYPES[dtype])
    dt = np.dtype(dtype)
    if dt not in DTYPE_NAMES:
        raise UsageError(f"unsupported dtype {dt}; expected float32 or float64")
    return dt


def assert_finite(arr: np.ndarray, where: str) -> None:
    """Raise NumericError if any element is NaN or infinite."""
    if not np.all(np.isfinite(arr)):
        bad = int(arr.size - np.count_nonzero(np.isfinite(arr)))
        raise NumericError(f"non-finite values ({bad} of {arr.size}) in {where}")


class Rng:
    """Deterministic splittable random stream on Philox counters.

    The same seed and call sequence produce the same stream on every platform.
    child(label) derives an independent stream keyed by a string, so e.g. each
    parameter's initialization does not depend on how many draws happened
    elsewhere.
    """

    def __init__(self, seed: int, _lineage: tuple[int, ...] = ()):
        self.seed = int(seed)
        self._lineage = _lineage
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=_lineage)
        self._gen = np.random.Generator(np.random.Philox(ss))

    def child(self, label: str) -> "Rng":
        key = zlib.crc32(label.encode("utf-8"))
        return Rng(self.seed, self._lineage + (key,))

    def normal(self, shape, std: float = 1.0) -> np.ndarray:
        return self._gen.normal(0.0, std, size=shape)

    def uniform(self, shape, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        return self._gen.uniform(low, high, size=shape)

    def integers(self, low, high=None, size=None) -> np.ndarray:
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)


def trunc_normal_init(shape, std: float, rng: Rng, dtype="f32") -> np.ndarray:
    """Draw from normal(0, std) truncated at +/- 2*std by resampling."""
    if std <= 0:
        raise UsageError(f"trunc_normal_init needs std > 0, got {std}")
    dt = resolve_dtype(dtype)
    out = np.asarray(rng.normal(shape, std), dtype=np.float64)
    bound = 2.0 * std
    for _ in range(64):
        bad = np.abs(out) > bound
        n_bad = int(bad.sum())
        if n_bad == 0:
            break
        out[bad] = rng.normal(n_bad, std)
    else:
        out = np.clip(out, -bound, bound)
    return out.astype(dt)


@dataclass
class Param:
    """A named value array with a same-shaped gradient accumulator."""

    name: str
    value: np.ndarray
    grad: np.ndarray


class ParameterSet:
    """Ordered name -> Param registry; iteration order is insertion order."""

    def __init__(self):
        self._entries: dict[str, Param] = {}

    def register(self, name: str, value: np.ndarray) -> Param:
        if name in self._entries:
            raise UsageError(f"duplicate parameter name {name!r}")
        value = np.ascontiguousarray(value)
        param = Param(name, value, np.zeros_like(value))
        self._entries[name] = param
        return param

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __getitem__(self, name: str) -> Param:
        if name not in self._entries:
            raise UsageError(f"unknown parameter {name!r}")
        return self._entries[name]

    def __iter__(self):
        return iter(self._entries.values())

    def __len__(self) -> int:
        return len(self._entries)

    def names(self) -> list[str]:
        return list(self._entries.keys())

    def zero_grads(self) -> None:
        for p in self._entries.values():
            p.grad[...] = 0.0

    def total_scalars(self) -> int:
        return sum(p.value.size for p in self._entries.values())

    def load_values(self, values: dict[str, np.ndarray], strict: bool = True) -> None:
        """Copy values into existing entries, casting to each entry's dtype."""
        for name, param in self._entries.items():
            if name not in values:
                if strict:
                    raise UsageError(f"missing value for parameter {name!r}")
                continue
            arr = np.asarray(values[name])
            if tuple(arr.shape) != tuple(param.value.shape):
                raise UsageError(
                    f"shape mismatch for {name!r}: have {param.value.shape}, got {arr.shape}"
                )
            param.value[...] = arr.astype(param.value.dtype)


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_param: str
    per_param: dict[str, float]

    @property
    def ok(self) -> bool:
        return np.isfinite(self.max_rel_error)


def grad_check(
    f,
    params: ParameterSet,
    eps: float = 1e-5,
    probes_per_param: int | None = None,
    rng: Rng | None = None,
) -> GradCheckReport:
    """Compare analytic gradients against central finite differences.

    ``f(params)`` must return a finite scalar and accumulate analytic
    gradients into ``params`` (grads are zeroed before the reference call).
    The reported error is, maximized over probed elements,
    |analytic - central_difference| / max(1, |central_difference|).

    With probes_per_param=None every element of every parameter is probed;
    otherwise each parameter gets a deterministic sample of positions (always
    including the first and last element).
    """
    params.zero_grads()
    base = float(f(params))
    if not np.isfinite(base):
        raise NumericError("objective is non-finite at the reference point")
    analytic = {p.name: p.grad.copy() for p in params}

    rng = rng if rng is not None else Rng(0)
    per_param: dict[str, float] = {}
    worst = ("", -1.0)

    for p in params:
        flat = p.value.reshape(-1)
        n = flat.size
        if probes_per_param is None or probes_per_param >= n:
            idx = np.arange(n)
        else:
            picks = {0, n - 1}
            child = rng.child(p.name)
            for j in child.integers(0, n, size=4 * probes_per_param):
                picks.add(int(j))
                if len(picks) >= probes_per_param:
                    break
            idx = np.array(sorted(picks))
        worst_here = 0.0
        ana_flat = analytic[p.name].reshape(-1)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(f(params))
            flat[i] = orig - eps
            fm = float(f(params))
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NumericError(f"objective non-finite while probing {p.name}[{i}]")
            fd = (fp - fm) / (2.0 * eps)
            rel = abs(ana_flat[i] - fd) / max(1.0, abs(fd))
            worst_here = max(worst_here, rel)
        per_param[p.name] = worst_here
        if worst_here > worst[1]:
            worst = (p.name, worst_here)

    return GradCheckReport(max_rel_error=worst[1], worst_param=worst[0], per_param=per_param)
