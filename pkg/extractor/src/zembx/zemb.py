"""ZEMB tensor file writer (and a reader for self-checks).

Wire format, little-endian throughout:

    magic "ZEMB" | version u32 = 1 | dtype u32 (0 = float32) | rank u32 |
    dims: rank x u64 | payload: row-major float32 |
    optional sidecar: u64 byte length + UTF-8 JSON {"labels": [...]}

This module is deliberately standalone: the file format is the contract
between this bridge and its consumers, so nothing is imported from them.
"""

from __future__ import annotations

import json
import struct

import numpy as np

MAGIC = b"ZEMB"
VERSION = 1
DTYPE_FLOAT32 = 0


def write_zemb(path, array: np.ndarray, labels: list[str] | None = None) -> None:
    a = np.ascontiguousarray(array, dtype=np.float32)
    if labels is not None and len(labels) != a.shape[0]:
        raise ValueError(f"{len(labels)} labels for leading dimension {a.shape[0]}")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<III", VERSION, DTYPE_FLOAT32, a.ndim))
        for d in a.shape:
            f.write(struct.pack("<Q", d))
        f.write(a.tobytes(order="C"))
        if labels is not None:
            sidecar = json.dumps({"labels": list(labels)}).encode("utf-8")
            f.write(struct.pack("<Q", len(sidecar)))
            f.write(sidecar)


def read_zemb(path) -> tuple[np.ndarray, list[str] | None]:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != MAGIC:
        raise ValueError("bad magic")
    version, dtype, rank = struct.unpack_from("<III", blob, 4)
    if version != VERSION or dtype != DTYPE_FLOAT32:
        raise ValueError(f"unsupported version/dtype {version}/{dtype}")
    dims = []
    off = 16
    for _ in range(rank):
        (d,) = struct.unpack_from("<Q", blob, off)
        dims.append(d)
        off += 8
    count = int(np.prod(dims))
    arr = np.frombuffer(blob, dtype="<f4", count=count, offset=off).reshape(dims).copy()
    off += count * 4
    labels = None
    if off < len(blob):
        (n,) = struct.unpack_from("<Q", blob, off)
        labels = [str(x) for x in json.loads(blob[off + 8 : off + 8 + n])["labels"]]
    return arr, labels
