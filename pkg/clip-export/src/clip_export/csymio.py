"""CSYM tensor files: the interchange format consumed by the detection engine.

Layout: magic `CSYM`, version u32 LE, rank u32 LE, shape entries u32 LE,
float32 little-endian payload in row-major order.  A JSON sidecar at
`<path>.json` carries geometry metadata.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"CSYM"
VERSION = 1


class CsymError(ValueError):
    pass


def write_tensor(path, array: np.ndarray) -> None:
    arr = np.ascontiguousarray(np.asarray(array, dtype=np.float32))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(arr.astype("<f4").tobytes())


def read_tensor(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise CsymError(f"{path}: bad magic {raw[:4]!r}")
    version, rank = struct.unpack("<II", raw[4:12])
    if version != VERSION:
        raise CsymError(f"{path}: unsupported version {version}")
    shape = struct.unpack(f"<{rank}I", raw[12 : 12 + 4 * rank])
    count = int(np.prod(shape, dtype=np.int64)) if rank else 1
    payload = raw[12 + 4 * rank :]
    if len(payload) != 4 * count:
        raise CsymError(f"{path}: payload size mismatch for shape {shape}")
    return np.frombuffer(payload, dtype="<f4", count=count).reshape(shape).copy()


def write_sidecar(path, meta: dict) -> None:
    Path(str(path) + ".json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
