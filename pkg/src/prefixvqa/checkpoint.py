"""Binary checkpoint container shared by base models, adapters and mappers.

Layout (little-endian)::

    b"PLMC"  u16 version  u32 config_len  config (UTF-8 JSON)
    repeated until EOF:
        u16 name_len  name (UTF-8)  u8 rank  u32 dim * rank  f64 * prod(dims)
"""

from __future__ import annotations

import json
import math
import struct
from pathlib import Path

import numpy as np

from .errors import CheckpointError

MAGIC = b"PLMC"
VERSION = 1


def write_checkpoint(path: str | Path, config: dict, tensors: dict[str, np.ndarray]) -> None:
    cfg = json.dumps(config, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<HI", VERSION, len(cfg)))
        fh.write(cfg)
        for name, arr in tensors.items():
            raw = name.encode("utf-8")
            arr = np.asarray(arr, dtype="<f8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr).tobytes())


def read_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {buf[:4]!r}")
    try:
        version, cfg_len = struct.unpack_from("<HI", buf, 4)
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported version {version}")
        pos = 10
        config = json.loads(buf[pos:pos + cfg_len].decode("utf-8"))
        pos += cfg_len
        tensors: dict[str, np.ndarray] = {}
        while pos < len(buf):
            (name_len,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            name = buf[pos:pos + name_len].decode("utf-8")
            pos += name_len
            (rank,) = struct.unpack_from("<B", buf, pos)
            pos += 1
            dims = struct.unpack_from(f"<{rank}I", buf, pos)
            pos += 4 * rank
            size = math.prod(dims)
            if pos + 8 * size > len(buf):
                raise CheckpointError(f"{path}: truncated tensor {name!r}")
            tensors[name] = np.frombuffer(buf, dtype="<f8", count=size, offset=pos).reshape(dims).astype(np.float64)
            pos += 8 * size
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint ({exc})") from exc
    return config, tensors
