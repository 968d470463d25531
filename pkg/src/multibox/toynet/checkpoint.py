"""Versioned binary weight checkpoints.

Layout (all integers little-endian):

    magic    8 bytes  b"MBXWGT01"
    version  u32      currently 1
    count    u32      number of parameter entries
    entries  count *  (name_len u16, name utf-8, ndim u8, dims u32 * ndim)
    data     raw float64 little-endian arrays, C order, in entry order
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"MBXWGT01"
VERSION = 1


def save_weights(path, named_params: list[tuple[str, np.ndarray]]) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(named_params)))
        for name, arr in named_params:
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", arr.ndim))
            for d in arr.shape:
                fh.write(struct.pack("<I", d))
        for _, arr in named_params:
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_weights(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != MAGIC:
            raise ValueError(f"not a weight checkpoint (bad magic {magic!r})")
        version, count = struct.unpack("<II", fh.read(8))
        if version != VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        entries = []
        for _ in range(count):
            (name_len,) = struct.unpack("<H", fh.read(2))
            name = fh.read(name_len).decode("utf-8")
            (ndim,) = struct.unpack("<B", fh.read(1))
            shape = tuple(struct.unpack("<I", fh.read(4))[0] for _ in range(ndim))
            entries.append((name, shape))
        out = {}
        for name, shape in entries:
            n = int(np.prod(shape)) if shape else 1
            raw = fh.read(8 * n)
            if len(raw) != 8 * n:
                raise ValueError(f"truncated checkpoint while reading {name}")
            out[name] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
        return out
