"""Single-file model checkpoints.

Layout (all integers little-endian)::

    magic        8 bytes   b"MEDCKPT\\0"
    version      uint32    currently 1
    config_len   uint32
    config       config_len bytes of UTF-8 JSON
    n_tensors    uint32
    n_tensors times:
        name_len  uint16
        name      name_len bytes of UTF-8
        ndim      uint8
        shape     ndim x uint32
        data      prod(shape) x float32, row-major

Tensors are written in sorted name order so identical weights give
identical bytes.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"MEDCKPT\0"
VERSION = 1


def save_checkpoint(path: str | Path, config: dict, tensors: Mapping[str, np.ndarray]) -> None:
    cfg = json.dumps(config, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(cfg)))
        fh.write(cfg)
        fh.write(struct.pack("<I", len(tensors)))
        for name in sorted(tensors):
            arr = np.asarray(tensors[name], dtype="<f4", order="C")  # keeps 0-d shapes
            raw = name.encode("utf-8")
            fh.write(struct.pack("<HB", len(raw), arr.ndim))
            fh.write(raw)
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes(order="C"))


def load_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise ValueError(f"{path} is not a medcoder checkpoint")
    version, cfg_len = struct.unpack_from("<II", data, 8)
    if version != VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    off = 16
    config = json.loads(data[off:off + cfg_len].decode("utf-8"))
    off += cfg_len
    (n,) = struct.unpack_from("<I", data, off)
    off += 4
    tensors = {}
    for _ in range(n):
        name_len, ndim = struct.unpack_from("<HB", data, off)
        off += 3
        name = data[off:off + name_len].decode("utf-8")
        off += name_len
        shape = struct.unpack_from(f"<{ndim}I", data, off)
        off += 4 * ndim
        count = int(np.prod(shape)) if ndim else 1
        tensors[name] = np.frombuffer(data, dtype="<f4", count=count, offset=off).reshape(shape).copy()
        off += 4 * count
    return config, tensors
