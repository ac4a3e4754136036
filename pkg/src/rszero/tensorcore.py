"""Dense tensor primitives shared by every other module.

Immutable array wrappers (embedding matrices, feature maps, binary masks),
numerically safe row normalization and softmax, mask pooling, a run-length
mask codec, and the ZEMB binary tensor file format.

All in-memory arithmetic is float64; ZEMB payloads are float32.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from .errors import (
    DimMismatch,
    EmptyMask,
    FormatError,
    NonFiniteInput,
    ValidationError,
    ZeroNormRow,
)

ZEMB_MAGIC = b"ZEMB"
ZEMB_VERSION = 1
ZEMB_DTYPE_FLOAT32 = 0

NORM_TOL = 1e-5


def _frozen_array(a: np.ndarray) -> np.ndarray:
    out = np.ascontiguousarray(a, dtype=np.float64)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class EmbeddingMatrix:
    """Row-major matrix of embeddings, one row per item, one column per channel.

    ``data`` is float64 and read-only after construction. When ``normalized``
    is set, every row must have unit L2 norm within 1e-5.
    """

    data: np.ndarray
    row_labels: list[str] | None = None
    normalized: bool = False

    def __post_init__(self):
        a = np.asarray(self.data, dtype=np.float64)
        if a.ndim != 2 or a.shape[0] < 1 or a.shape[1] < 1:
            raise DimMismatch(f"embedding matrix must be 2-D and non-empty, got shape {a.shape}")
        if not np.all(np.isfinite(a)):
            raise NonFiniteInput("embedding matrix contains NaN or Inf")
        if self.row_labels is not None and len(self.row_labels) != a.shape[0]:
            raise DimMismatch(
                f"{len(self.row_labels)} row labels for {a.shape[0]} rows"
            )
        if self.normalized:
            norms = np.sqrt(np.sum(a * a, axis=1))
            worst = np.max(np.abs(norms - 1.0))
            if worst > NORM_TOL:
                raise ValidationError(
                    f"matrix declared normalized but a row norm deviates by {worst:.3e}"
                )
        object.__setattr__(self, "data", _frozen_array(a))

    @property
    def n_rows(self) -> int:
        return self.data.shape[0]

    @property
    def n_cols(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class FeatureMap:
    """Dense 3-D feature tensor laid out channels x height x width."""

    data: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.data, dtype=np.float64)
        if a.ndim != 3 or min(a.shape) < 1:
            raise DimMismatch(f"feature map must be 3-D and non-empty, got shape {a.shape}")
        if not np.all(np.isfinite(a)):
            raise NonFiniteInput("feature map contains NaN or Inf")
        object.__setattr__(self, "data", _frozen_array(a))

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]


@dataclass(frozen=True)
class BinaryMask:
    """H x W boolean grid marking the pixels of one instance."""

    bits: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.bits)
        if b.dtype != np.bool_:
            b = b.astype(np.bool_)
        if b.ndim != 2 or min(b.shape) < 1:
            raise DimMismatch(f"mask must be 2-D and non-empty, got shape {b.shape}")
        b = np.ascontiguousarray(b)
        b.setflags(write=False)
        object.__setattr__(self, "bits", b)

    @property
    def shape(self) -> tuple[int, int]:
        return self.bits.shape

    @property
    def area(self) -> int:
        return int(np.count_nonzero(self.bits))


def l2_normalize_rows(m: EmbeddingMatrix) -> EmbeddingMatrix:
    """Scale each row to unit L2 norm.

    Raises ZeroNormRow for any row with norm below 1e-12.
    """
    norms = np.sqrt(np.sum(m.data * m.data, axis=1))
    bad = np.flatnonzero(norms < 1e-12)
    if bad.size:
        raise ZeroNormRow(int(bad[0]))
    return EmbeddingMatrix(m.data / norms[:, None], row_labels=m.row_labels, normalized=True)


def normalize_vector(v: np.ndarray) -> np.ndarray:
    """Unit-norm copy of a 1-D vector; raises ZeroNormRow(0) on near-zero input."""
    v = np.asarray(v, dtype=np.float64)
    n = float(np.sqrt(np.sum(v * v)))
    if n < 1e-12:
        raise ZeroNormRow(0)
    return v / n


def softmax(v: np.ndarray) -> np.ndarray:
    """Numerically stable softmax (max is subtracted before exponentiation)."""
    v = np.asarray(v, dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise NonFiniteInput("softmax input contains NaN or Inf")
    shifted = v - np.max(v)
    e = np.exp(shifted)
    return e / np.sum(e)


def mask_pool(fm: FeatureMap, mask: BinaryMask) -> np.ndarray:
    """Per-channel mean of feature values at the mask's set pixels.

    The mean (rather than the sum) keeps pooled vectors on a common scale
    across mask sizes, which matters because callers compare them by cosine.
    """
    if mask.shape != (fm.height, fm.width):
        raise DimMismatch(
            f"mask shape {mask.shape} does not match feature map {fm.height}x{fm.width}"
        )
    if mask.area == 0:
        raise EmptyMask("mask has no set pixels")
    return fm.data[:, mask.bits].mean(axis=1)


# ---------------------------------------------------------------------------
# Run-length mask codec
#
# Counts are row-major and alternate background/foreground starting with a
# background run; a leading 0 encodes a mask whose first pixel is set.

def rle_encode(mask: BinaryMask) -> list[int]:
    flat = mask.bits.reshape(-1)
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    starts = np.concatenate(([0], change))
    ends = np.concatenate((change, [flat.size]))
    runs = (ends - starts).tolist()
    if flat[0]:
        runs.insert(0, 0)
    return [int(r) for r in runs]


def rle_decode(h: int, w: int, counts: list[int]) -> BinaryMask:
    if h < 1 or w < 1:
        raise FormatError(f"bad mask dims {h}x{w}")
    if any((not isinstance(c, int)) or c < 0 for c in counts):
        raise FormatError("rle counts must be non-negative integers")
    total = sum(counts)
    if total != h * w:
        raise FormatError(f"rle counts sum to {total}, expected {h * w}")
    flat = np.zeros(h * w, dtype=np.bool_)
    pos = 0
    value = False
    for c in counts:
        if value:
            flat[pos : pos + c] = True
        pos += c
        value = not value
    return BinaryMask(flat.reshape(h, w))


# ---------------------------------------------------------------------------
# ZEMB file format
#
# magic "ZEMB" | version u32 LE | dtype u32 LE (0 = float32) | rank u32 LE |
# dims rank x u64 LE | payload row-major float32 LE |
# optional trailing sidecar: u64 LE byte length + UTF-8 JSON {"labels": [...]}.

def write_zemb(path, array: np.ndarray, labels: list[str] | None = None) -> None:
    """Write a tensor of any rank as a ZEMB file (payload cast to float32)."""
    a = np.ascontiguousarray(array, dtype=np.float32)
    if a.ndim < 1:
        raise DimMismatch("cannot write a 0-d tensor")
    if labels is not None and len(labels) != a.shape[0]:
        raise DimMismatch(f"{len(labels)} labels for leading dimension {a.shape[0]}")
    with open(path, "wb") as f:
        f.write(ZEMB_MAGIC)
        f.write(struct.pack("<III", ZEMB_VERSION, ZEMB_DTYPE_FLOAT32, a.ndim))
        for d in a.shape:
            f.write(struct.pack("<Q", d))
        f.write(a.tobytes(order="C"))
        if labels is not None:
            sidecar = json.dumps({"labels": list(labels)}).encode("utf-8")
            f.write(struct.pack("<Q", len(sidecar)))
            f.write(sidecar)


def read_zemb(path) -> tuple[np.ndarray, list[str] | None]:
    """Read a ZEMB file; returns (float32 array, labels or None).

    Raises FormatError with the byte offset of the first problem. Unknown
    versions and dtypes are rejected.
    """
    with open(path, "rb") as f:
        blob = f.read()

    def need(offset: int, count: int, what: str) -> bytes:
        if offset + count > len(blob):
            raise FormatError(f"truncated file while reading {what}", offset=offset)
        return blob[offset : offset + count]

    if need(0, 4, "magic") != ZEMB_MAGIC:
        raise FormatError("bad magic", offset=0)
    (version,) = struct.unpack("<I", need(4, 4, "version"))
    if version != ZEMB_VERSION:
        raise FormatError(f"unsupported version {version}", offset=4)
    (dtype,) = struct.unpack("<I", need(8, 4, "dtype"))
    if dtype != ZEMB_DTYPE_FLOAT32:
        raise FormatError(f"unsupported dtype code {dtype}", offset=8)
    (rank,) = struct.unpack("<I", need(12, 4, "rank"))
    if rank < 1 or rank > 8:
        raise FormatError(f"implausible rank {rank}", offset=12)
    dims = []
    off = 16
    for _ in range(rank):
        (d,) = struct.unpack("<Q", need(off, 8, "dims"))
        if d < 1:
            raise FormatError("zero-sized dimension", offset=off)
        dims.append(d)
        off += 8
    count = 1
    for d in dims:
        count *= d
    payload_offset = off
    payload = need(payload_offset, count * 4, "payload")
    arr = np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
    off = payload_offset + count * 4

    labels = None
    if off < len(blob):
        (n,) = struct.unpack("<Q", need(off, 8, "sidecar length"))
        off += 8
        raw = need(off, n, "sidecar")
        if off + n != len(blob):
            raise FormatError("trailing bytes after sidecar", offset=off + n)
        try:
            sidecar = json.loads(raw.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise FormatError(f"sidecar is not valid JSON: {e}", offset=off) from e
        if not isinstance(sidecar, dict) or "labels" not in sidecar:
            raise FormatError("sidecar must be an object with a 'labels' key", offset=off)
        labels = [str(x) for x in sidecar["labels"]]
        if len(labels) != dims[0]:
            raise FormatError(
                f"{len(labels)} labels for leading dimension {dims[0]}", offset=off
            )
    return arr, labels


def write_embeddings(path, m: EmbeddingMatrix) -> None:
    write_zemb(path, m.data, labels=m.row_labels)


def read_embeddings(path) -> EmbeddingMatrix:
    arr, labels = read_zemb(path)
    if arr.ndim != 2:
        raise FormatError(f"expected a rank-2 tensor, got rank {arr.ndim}")
    return EmbeddingMatrix(arr.astype(np.float64), row_labels=labels)


def write_feature_map(path, fm: FeatureMap) -> None:
    write_zemb(path, fm.data)


def read_feature_map(path) -> FeatureMap:
    arr, _ = read_zemb(path)
    if arr.ndim != 3:
        raise FormatError(f"expected a rank-3 tensor, got rank {arr.ndim}")
    return FeatureMap(arr.astype(np.float64))
