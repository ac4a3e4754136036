"""Knowledge-maintained adaptation of visual feature channels.

Backbone channels are split into a frozen group (highest combined score:
low inter-class similarity, high variance, i.e. the semantically aligned
channels) and a trainable group. Adaptation is a per-channel affine map
whose gradient is masked so frozen channels are provably never touched:
their scale/bias stay exactly (1.0, 0.0) for any training trajectory, which
is the desk-scale stand-in for selectively training backbone channels.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import dec, tensorcore
from .errors import BadCount, DimMismatch, EmptyBatch, ValidationError
from .tensorcore import EmbeddingMatrix, FeatureMap


@dataclass(frozen=True)
class ChannelPartition:
    """Two-coloring of channel indices into frozen and trainable groups."""

    frozen: list[int]
    trainable: list[int]
    source_D: int

    def __post_init__(self):
        f, t = set(self.frozen), set(self.trainable)
        if f & t:
            raise ValidationError("frozen and trainable groups overlap")
        if f | t != set(range(self.source_D)):
            raise ValidationError("partition does not cover all channel indices")
        if list(self.frozen) != sorted(f) or list(self.trainable) != sorted(t):
            raise ValidationError("partition index lists must be sorted ascending")

    def to_json_dict(self) -> dict:
        return {
            "source_D": self.source_D,
            "frozen": list(self.frozen),
            "trainable": list(self.trainable),
        }

    @classmethod
    def from_json_dict(cls, obj: dict) -> "ChannelPartition":
        return cls(
            frozen=[int(i) for i in obj["frozen"]],
            trainable=[int(i) for i in obj["trainable"]],
            source_D=int(obj["source_D"]),
        )


@dataclass(frozen=True)
class ChannelAdapter:
    """Per-channel affine map ``out = scale * x + bias`` with frozen channels pinned."""

    scale: np.ndarray
    bias: np.ndarray
    partition: ChannelPartition

    def __post_init__(self):
        s = np.asarray(self.scale, dtype=np.float64)
        b = np.asarray(self.bias, dtype=np.float64)
        d = self.partition.source_D
        if s.shape != (d,) or b.shape != (d,):
            raise DimMismatch(f"adapter parameters must have shape ({d},)")
        fr = self.partition.frozen
        if fr and (np.any(s[fr] != 1.0) or np.any(b[fr] != 0.0)):
            raise ValidationError("frozen channels must keep scale 1.0 and bias 0.0")
        for name, a in (("scale", s), ("bias", b)):
            a = np.ascontiguousarray(a)
            a.setflags(write=False)
            object.__setattr__(self, name, a)


def fresh_adapter(partition: ChannelPartition) -> ChannelAdapter:
    d = partition.source_D
    return ChannelAdapter(scale=np.ones(d), bias=np.zeros(d), partition=partition)


def class_feature_means(
    per_class_instances: "dict[str, Sequence[np.ndarray]]", T: int = 1
) -> EmbeddingMatrix:
    """Average the first T instance features of every class into one row.

    Produces the per-class matrix expected by :func:`partition_channels`
    (rows L2-normalized, one per class, insertion order preserved).
    """
    if T < 1:
        raise BadCount(f"T must be >= 1, got {T}")
    rows = []
    labels = []
    for name, vecs in per_class_instances.items():
        if len(vecs) < T:
            raise BadCount(f"class {name!r} has {len(vecs)} instances, need T={T}")
        rows.append(np.mean([np.asarray(v, dtype=np.float64) for v in vecs[:T]], axis=0))
        labels.append(name)
    if not rows:
        raise EmptyBatch("no classes provided")
    return tensorcore.l2_normalize_rows(EmbeddingMatrix(np.stack(rows), row_labels=labels))


def partition_channels(
    class_features: EmbeddingMatrix, lam: float, n_trainable: int
) -> ChannelPartition:
    """Partition channels by the same similarity/variance criterion used for text.

    ``class_features`` holds one row per seen class (mean of its instance
    backbone features, L2-normalized). The top (D - n_trainable) channels by
    combined score O become the frozen group, the remainder is trainable.
    """
    d = class_features.n_cols
    if not 0 < n_trainable < d:
        raise BadCount(f"n_trainable={n_trainable} outside (0, {d})")
    score = dec.score_channels(class_features, lam)
    frozen = sorted(dec.select_top_k(score, d - n_trainable).indices)
    trainable = sorted(set(range(d)) - set(frozen))
    return ChannelPartition(frozen=frozen, trainable=trainable, source_D=d)


def apply_adapter(adapter: ChannelAdapter, fm: FeatureMap) -> FeatureMap:
    """Apply the affine map channelwise; frozen channels pass through bit-identically."""
    if fm.channels != adapter.partition.source_D:
        raise DimMismatch(
            f"feature map has {fm.channels} channels, adapter expects "
            f"{adapter.partition.source_D}"
        )
    out = fm.data.copy()
    tr = adapter.partition.trainable
    if tr:
        out[tr] = adapter.scale[tr, None, None] * fm.data[tr] + adapter.bias[tr, None, None]
    return FeatureMap(out)


def _adapt_vector(adapter: ChannelAdapter, f: np.ndarray) -> np.ndarray:
    out = f.copy()
    tr = adapter.partition.trainable
    if tr:
        out[tr] = adapter.scale[tr] * f[tr] + adapter.bias[tr]
    return out


def adapter_loss_and_gradients(
    adapter: ChannelAdapter,
    batch: Sequence[tuple[np.ndarray, int]],
    classifier: dec.Classifier,
) -> tuple[float, np.ndarray, np.ndarray]:
    """Mean cross-entropy of cosine scores over the batch plus analytic gradients.

    Returns (loss, d_loss/d_scale, d_loss/d_bias); gradient entries on frozen
    channels are zeroed before being returned, so any update built from them
    leaves the frozen parameters untouched by construction.

    For each sample (f, y) the forward pass is a = scale*f + bias, sliced to
    the classifier's channel selection when one is present, normalized to a
    unit query u, scored z = W u, and penalized with -log softmax(z)_y.
    """
    if not batch:
        raise EmptyBatch("batch is empty")
    d = adapter.partition.source_D
    w = classifier.weights.data
    n_classes = classifier.n_classes
    if classifier.selection is not None:
        if classifier.selection.source_D != d:
            raise DimMismatch(
                f"classifier selection built for D={classifier.selection.source_D}, "
                f"adapter has D={d}"
            )
        idx = np.asarray(classifier.selection.indices, dtype=np.intp)
    else:
        if classifier.weights.n_cols != d:
            raise DimMismatch(
                f"classifier width {classifier.weights.n_cols} does not match "
                f"adapter D={d}"
            )
        idx = None

    g_scale = np.zeros(d)
    g_bias = np.zeros(d)
    total_loss = 0.0
    for f, y in batch:
        f = np.asarray(f, dtype=np.float64)
        if f.shape != (d,):
            raise DimMismatch(f"feature vector shape {f.shape}, expected ({d},)")
        if not 0 <= y < n_classes:
            raise DimMismatch(f"label {y} outside [0, {n_classes})")
        a = _adapt_vector(adapter, f)
        x = a[idx] if idx is not None else a
        r = float(np.sqrt(np.sum(x * x)))
        if r < 1e-12:
            raise DimMismatch("adapted feature collapsed to zero norm")
        u = x / r
        z = w @ u
        z_shift = z - np.max(z)
        log_probs = z_shift - np.log(np.sum(np.exp(z_shift)))
        total_loss += -log_probs[y]

        dz = np.exp(log_probs)
        dz[y] -= 1.0
        du = w.T @ dz
        dx = (du - u * float(u @ du)) / r
        da = np.zeros(d)
        if idx is not None:
            da[idx] = dx
        else:
            da = dx
        g_scale += da * f
        g_bias += da

    b = len(batch)
    g_scale /= b
    g_bias /= b
    fr = adapter.partition.frozen
    g_scale[fr] = 0.0
    g_bias[fr] = 0.0
    return total_loss / b, g_scale, g_bias


def adapter_step(
    adapter: ChannelAdapter,
    batch: Sequence[tuple[np.ndarray, int]],
    classifier: dec.Classifier,
    lr: float,
) -> tuple[ChannelAdapter, float]:
    """One gradient-descent step; returns the updated adapter and the pre-step loss."""
    loss, g_scale, g_bias = adapter_loss_and_gradients(adapter, batch, classifier)
    new = ChannelAdapter(
        scale=adapter.scale - lr * g_scale,
        bias=adapter.bias - lr * g_bias,
        partition=adapter.partition,
    )
    return new, loss


def write_adapter(path, adapter: ChannelAdapter) -> None:
    """Persist adapter state as a 2 x D ZEMB matrix (row 0 scale, row 1 bias)."""
    tensorcore.write_zemb(path, np.stack([adapter.scale, adapter.bias]))


def read_adapter(path, partition: ChannelPartition) -> ChannelAdapter:
    arr, _ = tensorcore.read_zemb(path)
    if arr.shape != (2, partition.source_D):
        raise DimMismatch(
            f"adapter file holds shape {arr.shape}, expected (2, {partition.source_D})"
        )
    return ChannelAdapter(
        scale=arr[0].astype(np.float64), bias=arr[1].astype(np.float64), partition=partition
    )
