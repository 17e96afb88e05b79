"""CSYM raw tensor files.

Layout: magic `CSYM`, version (u32 LE), rank (u32 LE), one u32 LE per shape
entry, then float32 little-endian payload in row-major order.  The format is
the persistence boundary shared by every module and by external exporters.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"CSYM"
VERSION = 1
MAX_RANK = 16


class CsymFormatError(ValueError):
    """Malformed CSYM file; the message names the offending field."""


def write_tensor(path, array) -> None:
    arr = np.ascontiguousarray(np.asarray(getattr(array, "data", array), dtype=np.float32))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(arr.astype("<f4").tobytes())


def read_tensor(path) -> np.ndarray:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 12:
        raise CsymFormatError(f"{path}: truncated header")
    if raw[:4] != MAGIC:
        raise CsymFormatError(f"{path}: bad magic {raw[:4]!r}")
    version, rank = struct.unpack("<II", raw[4:12])
    if version != VERSION:
        raise CsymFormatError(f"{path}: unsupported version {version}")
    if rank > MAX_RANK:
        raise CsymFormatError(f"{path}: implausible rank {rank}")
    header_end = 12 + 4 * rank
    if len(raw) < header_end:
        raise CsymFormatError(f"{path}: truncated shape")
    shape = struct.unpack(f"<{rank}I", raw[12:header_end])
    count = int(np.prod(shape, dtype=np.int64)) if rank else 1
    payload = raw[header_end:]
    if len(payload) != 4 * count:
        raise CsymFormatError(
            f"{path}: payload holds {len(payload) // 4} floats, shape {shape} needs {count}"
        )
    data = np.frombuffer(payload, dtype="<f4", count=count)
    return data.reshape(shape).astype(np.float32)


def write_sidecar(path, meta: dict) -> None:
    """JSON sidecar next to a tensor file (geometry and provenance notes)."""
    Path(str(path) + ".json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def read_sidecar(path) -> dict:
    sidecar = Path(str(path) + ".json")
    if not sidecar.exists():
        raise CsymFormatError(f"{sidecar}: missing sidecar metadata")
    return json.loads(sidecar.read_text())
