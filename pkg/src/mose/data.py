"""Multispectral raster IO, normalization, synthetic pairs, batching.

The MSR container is the authoritative on-disk format. Byte layout, all
little-endian:

    magic   4 bytes  b"MSR1"
    height  u32
    width   u32
    bands   u32
    dtype   u32      code 1 = float32 (the only defined code)
    stats   per band: f32 min, f32 max   (denormalization range)
    pixels  bands * height * width f32, planar band-major, normalized [0, 1]

PNG import/export exists only for human inspection; MSR carries the data.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass

import numpy as np

from .errors import DataError, UsageError
from .fileio import atomic_write
from .metrics import bicubic_resize
from .numerics import Rng

MSR_MAGIC = b"MSR1"
MSR_DTYPE_F32 = 1


@dataclass
class RasterImage:
    """Planar multispectral image; pixels normalized to [0, 1] per band."""

    pixels: np.ndarray  # (bands, H, W) float32
    band_stats: list[tuple[float, float]]  # per-band (min, max) of the raw data

    def __post_init__(self):
        self.pixels = np.ascontiguousarray(self.pixels, dtype=np.float32)
        if self.pixels.ndim != 3:
            raise DataError(f"raster pixels must be (bands, H, W), got {self.pixels.shape}")
        if len(self.band_stats) != self.pixels.shape[0]:
            raise DataError(
                f"{len(self.band_stats)} band stats for {self.pixels.shape[0]} bands")
        for lo, hi in self.band_stats:
            if not (np.isfinite(lo) and np.isfinite(hi) and hi > lo):
                raise DataError(f"invalid band stats ({lo}, {hi}): need finite max > min")

    @property
    def bands(self) -> int:
        return self.pixels.shape[0]

    @property
    def height(self) -> int:
        return self.pixels.shape[1]

    @property
    def width(self) -> int:
        return self.pixels.shape[2]

    def denormalized(self) -> np.ndarray:
        out = np.empty_like(self.pixels, dtype=np.float64)
        for s, (lo, hi) in enumerate(self.band_stats):
            out[s] = self.pixels[s].astype(np.float64) * (hi - lo) + lo
        return out


def normalize_bands(raw: np.ndarray) -> RasterImage:
    """Min-max normalize each band of a raw (bands, H, W) array to [0, 1]."""
    raw = np.asarray(raw, dtype=np.float64)
    stats = []
    norm = np.empty_like(raw)
    for s in range(raw.shape[0]):
        lo, hi = float(raw[s].min()), float(raw[s].max())
        if hi <= lo:
            hi = lo + 1.0  # constant band: degenerate range widened to keep [0,1]
        norm[s] = (raw[s] - lo) / (hi - lo)
        stats.append((lo, hi))
    return RasterImage(norm.astype(np.float32), stats)


@dataclass
class PairSample:
    name: str
    lr: RasterImage
    hr: RasterImage
    scale: int

    def __post_init__(self):
        if (self.hr.height, self.hr.width) != (self.scale * self.lr.height,
                                               self.scale * self.lr.width):
            raise DataError(
                f"pair {self.name!r}: hr {self.hr.height}x{self.hr.width} is not "
                f"{self.scale}x the lr {self.lr.height}x{self.lr.width}")


# ---------------------------------------------------------------------------
# MSR read/write


def write_msr(path: str, img: RasterImage) -> None:
    with atomic_write(path) as tmp:
        with open(tmp, "wb") as fh:
            fh.write(MSR_MAGIC)
            fh.write(struct.pack("<IIII", img.height, img.width, img.bands, MSR_DTYPE_F32))
            for lo, hi in img.band_stats:
                fh.write(struct.pack("<ff", lo, hi))
            fh.write(np.ascontiguousarray(img.pixels).astype("<f4", copy=False).tobytes())


def _read_exact(fh, n: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise DataError(f"truncated MSR file: wanted {n} bytes for {what} "
                        f"at offset {fh.tell() - len(buf)}")
    return buf


def read_msr(path: str) -> RasterImage:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MSR_MAGIC:
            raise DataError(f"bad MSR magic {magic!r} at offset 0 (expected {MSR_MAGIC!r})")
        h, w, bands, code = struct.unpack("<IIII", _read_exact(fh, 16, "header"))
        if code != MSR_DTYPE_F32:
            raise DataError(f"unsupported MSR dtype code {code} at offset 16")
        stats = []
        for s in range(bands):
            lo, hi = struct.unpack("<ff", _read_exact(fh, 8, f"band {s} stats"))
            stats.append((float(lo), float(hi)))
        payload = _read_exact(fh, 4 * bands * h * w, "pixel payload")
        if fh.read(1):
            raise DataError("trailing bytes after MSR payload")
        pixels = np.frombuffer(payload, dtype="<f4").reshape(bands, h, w).copy()
    return RasterImage(pixels, stats)


def msr_file_size(bands: int, h: int, w: int) -> int:
    """Exact on-disk size: 20-byte header + 8 bytes/band stats + f32 payload."""
    return 20 + 8 * bands + 4 * bands * h * w


# ---------------------------------------------------------------------------
# PNG previews (Pillow)


def write_png(path: str, img: RasterImage, bit_depth: int = 8) -> None:
    """Preview export; 1 band -> grayscale (8 or 16 bit), 2 -> LA, 3 -> RGB, 4 -> RGBA."""
    from PIL import Image

    if img.bands > 4:
        raise UsageError(f"PNG preview supports 1-4 bands, got {img.bands}")
    if bit_depth not in (8, 16):
        raise UsageError("bit_depth must be 8 or 16")
    clipped = np.clip(img.pixels, 0.0, 1.0)
    if bit_depth == 16:
        if img.bands != 1:
            raise UsageError("16-bit PNG preview supports a single band only")
        arr = (clipped[0] * 65535.0 + 0.5).astype(np.uint16)
        pil = Image.fromarray(arr, mode="I;16")
    else:
        arr = (clipped * 255.0 + 0.5).astype(np.uint8)
        mode = {1: "L", 2: "LA", 3: "RGB", 4: "RGBA"}[img.bands]
        pil = Image.fromarray(arr[0] if img.bands == 1 else np.moveaxis(arr, 0, -1), mode=mode)
    with atomic_write(path) as tmp:
        pil.save(tmp, format="PNG")


def read_png(path: str) -> RasterImage:
    from PIL import Image

    with Image.open(path) as pil:
        arr = np.asarray(pil)
    if arr.dtype == np.uint8:
        scale = 255.0
    elif arr.dtype in (np.uint16, np.int32):
        scale = 65535.0
    else:
        raise DataError(f"unsupported PNG sample type {arr.dtype}")
    if arr.ndim == 2:
        arr = arr[:, :, None]
    pixels = np.moveaxis(arr.astype(np.float32) / scale, -1, 0)
    return RasterImage(pixels, [(0.0, float(scale))] * pixels.shape[0])


# ---------------------------------------------------------------------------
# synthetic corpus


def _synth_field(bands: int, hw: int, rng: Rng) -> np.ndarray:
    """Random field: mid-frequency sinusoids plus many sharp soft edges.

    Edge widths around one HR pixel put real content above the LR Nyquist
    rate, so the bicubic baseline measurably degrades the downsampled copy.
    """
    yy, xx = np.meshgrid(np.linspace(0.0, 1.0, hw), np.linspace(0.0, 1.0, hw), indexing="ij")
    base = np.zeros((bands, hw, hw))
    n_waves, n_texture, n_edges = 6, 15, 25
    for i in range(n_waves):
        fy, fx = rng.uniform(2, low=0.5, high=7.0)
        phase = rng.uniform(1, low=0.0, high=2 * np.pi)[0]
        amp = rng.uniform(1, low=0.3, high=1.0)[0] / (1.0 + 0.4 * (fy + fx))
        wave = amp * np.sin(2 * np.pi * (fy * yy + fx * xx) + phase)
        mix = rng.uniform(bands, low=0.2, high=1.0)
        base += mix[:, None, None] * wave
    for i in range(n_texture):  # texture between half- and full-scale Nyquist
        fy, fx = rng.uniform(2, low=hw / 8.0, high=hw / 3.2)
        phase = rng.uniform(1, low=0.0, high=2 * np.pi)[0]
        amp = 0.25 * rng.uniform(1, low=0.3, high=1.0)[0]
        wave = amp * np.sin(2 * np.pi * (fy * yy + fx * xx) + phase)
        mix = rng.uniform(bands, low=0.2, high=1.0)
        base += mix[:, None, None] * wave
    px = 1.0 / hw
    for i in range(n_edges):
        theta = rng.uniform(1, low=0.0, high=np.pi)[0]
        a, b = np.cos(theta), np.sin(theta)
        c = rng.uniform(1, low=0.15, high=0.85)[0] * (a + b)
        width = rng.uniform(1, low=0.5 * px, high=1.2 * px)[0]
        amp = rng.uniform(1, low=0.4, high=0.9)[0] * (1 if rng.uniform(1)[0] < 0.5 else -1)
        edge = np.tanh((a * xx + b * yy - c) / width)
        mix = rng.uniform(bands, low=0.3, high=1.0)
        base += amp * mix[:, None, None] * edge
    return base


def synth_pairs(n: int, hw: int, scale: int, rng: Rng, bands: int = 4) -> list[PairSample]:
    """Procedural LR/HR pairs: HR is a synthetic field, LR its bicubic 1/r."""
    if hw % scale:
        raise UsageError(f"hw={hw} not divisible by scale={scale}")
    pairs = []
    for i in range(n):
        child = rng.child(f"pair{i}")
        hr = normalize_bands(_synth_field(bands, hw, child))
        lr_pixels = np.clip(bicubic_resize(hr.pixels, 1.0 / scale), 0.0, 1.0)
        lr = RasterImage(lr_pixels.astype(np.float32), list(hr.band_stats))
        pairs.append(PairSample(name=f"synth{i:04d}", lr=lr, hr=hr, scale=scale))
    return pairs


def save_pairs(directory: str, pairs: list[PairSample]) -> None:
    os.makedirs(directory, exist_ok=True)
    for p in pairs:
        write_msr(os.path.join(directory, f"{p.name}_lr.msr"), p.lr)
        write_msr(os.path.join(directory, f"{p.name}_hr.msr"), p.hr)


def load_pairs(directory: str) -> list[PairSample]:
    """Load *_lr.msr / *_hr.msr pairs, sorted by name; the hr/lr ratio sets scale."""
    if not os.path.isdir(directory):
        raise DataError(f"corpus directory {directory!r} does not exist")
    names = sorted(
        f[: -len("_lr.msr")] for f in os.listdir(directory) if f.endswith("_lr.msr"))
    if not names:
        raise DataError(f"no *_lr.msr files in {directory!r}")
    pairs = []
    for name in names:
        lr_path = os.path.join(directory, f"{name}_lr.msr")
        hr_path = os.path.join(directory, f"{name}_hr.msr")
        if not os.path.exists(hr_path):
            raise DataError(f"missing HR file for pair {name!r}")
        lr = read_msr(lr_path)
        hr = read_msr(hr_path)
        if hr.height % lr.height or hr.width % lr.width:
            raise DataError(f"pair {name!r}: hr dims not an integer multiple of lr dims")
        scale = hr.height // lr.height
        if scale != hr.width // lr.width:
            raise DataError(f"pair {name!r}: inconsistent hr/lr ratio across axes")
        pairs.append(PairSample(name=name, lr=lr, hr=hr, scale=scale))
    return pairs


def batcher(samples, batch_size: int, rng: Rng):
    """Deterministic shuffled batches; the last partial batch is kept."""
    if len(samples) == 0:
        raise DataError("empty corpus")
    if batch_size < 1:
        raise UsageError("batch_size must be >= 1")
    order = rng.permutation(len(samples))
    return [[samples[int(i)] for i in order[s : s + batch_size]]
            for s in range(0, len(samples), batch_size)]
