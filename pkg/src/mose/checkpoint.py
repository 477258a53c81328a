"""Binary checkpoint format ("MSCK").

Layout, all integers little-endian:

    magic    4 bytes   b"MSCK"
    version  u32       currently 1
    config   u32 byte length, then that many bytes of UTF-8 JSON
    entries, repeated until end of file:
        name     u32 byte length, then UTF-8 bytes
        rank     u32
        extents  rank * u32
        payload  prod(extents) float32 values, little-endian, C order

Model parameters are written in registry order followed by optimizer state
entries (reserved "opt." name prefix), so two identically-seeded training
runs produce byte-identical files.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .errors import DataError
from .fileio import atomic_write

MAGIC = b"MSCK"
VERSION = 1


def save_checkpoint(path: str, config: dict, entries) -> None:
    """Write config echo plus (name, array) entries; arrays are stored f32."""
    blob = json.dumps(config, sort_keys=True).encode("utf-8")
    with atomic_write(path) as tmp:
        with open(tmp, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<I", VERSION))
            fh.write(struct.pack("<I", len(blob)))
            fh.write(blob)
            for name, arr in entries:
                arr = np.ascontiguousarray(arr).astype("<f4", copy=False)
                name_b = name.encode("utf-8")
                fh.write(struct.pack("<I", len(name_b)))
                fh.write(name_b)
                fh.write(struct.pack("<I", arr.ndim))
                fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
                fh.write(arr.tobytes())


def _read_exact(fh, n: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise DataError(f"truncated checkpoint: expected {n} bytes for {what} at offset {fh.tell() - len(buf)}")
    return buf


def load_checkpoint(path: str) -> tuple[dict, dict[str, np.ndarray]]:
    """Read a checkpoint; returns (config, name -> float32 array)."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise DataError(f"bad checkpoint magic {magic!r} at offset 0 (expected {MAGIC!r})")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
        if version != VERSION:
            raise DataError(f"unsupported checkpoint version {version}")
        (blob_len,) = struct.unpack("<I", _read_exact(fh, 4, "config length"))
        try:
            config = json.loads(_read_exact(fh, blob_len, "config blob").decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise DataError(f"invalid checkpoint config JSON: {exc}") from exc

        entries: dict[str, np.ndarray] = {}
        while True:
            head = fh.read(4)
            if not head:
                break
            if len(head) != 4:
                raise DataError(f"truncated checkpoint entry header at offset {fh.tell() - len(head)}")
            (name_len,) = struct.unpack("<I", head)
            name = _read_exact(fh, name_len, "entry name").decode("utf-8")
            (rank,) = struct.unpack("<I", _read_exact(fh, 4, f"rank of {name!r}"))
            shape = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank, f"extents of {name!r}")) if rank else ()
            count = int(np.prod(shape, dtype=np.int64)) if shape else 1
            payload = _read_exact(fh, 4 * count, f"payload of {name!r}")
            arr = np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float32)
            if name in entries:
                raise DataError(f"duplicate checkpoint entry {name!r}")
            entries[name] = arr
    return config, entries
