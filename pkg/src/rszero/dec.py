"""Discrimination-enhanced text classifier.

Scores every embedding channel by how similar it is across classes and how
much it varies, keeps the top-k channels that minimize similarity while
maximizing variance, and builds a cosine classifier restricted to those
channels. The per-channel statistics over L2-normalized class embeddings
x_1..x_N are

    S_d = 1/(N(N-1)) * sum_{i != j} x_{i,d} * x_{j,d}
    V_d = 1/N * sum_i (x_{i,d} - mean_d)^2      (population variance)
    O_d = -lambda * S_d + (1 - lambda) * V_d

and selection takes the k largest O_d.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensorcore
from .errors import (
    DimMismatch,
    EmptyTemplateList,
    KOutOfRange,
    ShapeMismatch,
    TooFewClasses,
    ValidationError,
)
from .tensorcore import EmbeddingMatrix


@dataclass(frozen=True)
class ChannelScore:
    """Per-channel similarity S, variance V, and combined objective O."""

    S: np.ndarray
    V: np.ndarray
    O: np.ndarray
    lam: float

    def __post_init__(self):
        S = np.asarray(self.S, dtype=np.float64)
        V = np.asarray(self.V, dtype=np.float64)
        O = np.asarray(self.O, dtype=np.float64)
        if not (S.shape == V.shape == O.shape) or S.ndim != 1:
            raise ShapeMismatch("S, V, O must be 1-D vectors of equal length")
        if not 0.0 <= self.lam <= 1.0:
            raise ValidationError(f"lambda must lie in [0, 1], got {self.lam}")
        if np.any(V < 0):
            raise ValidationError("variance vector has a negative entry")
        for name, a in (("S", S), ("V", V), ("O", O)):
            a.setflags(write=False)
            object.__setattr__(self, name, a)

    @property
    def n_channels(self) -> int:
        return self.S.shape[0]


@dataclass(frozen=True)
class ChannelSelection:
    """Ordered top-k channel index set.

    ``indices`` are sorted by descending O score with ties broken by
    ascending channel index, so equal scores always select deterministically.
    """

    indices: list[int]
    k: int
    source_D: int

    def __post_init__(self):
        if self.k != len(self.indices):
            raise ValidationError(f"k={self.k} but {len(self.indices)} indices")
        if not 1 <= self.k <= self.source_D:
            raise KOutOfRange(f"k={self.k} outside [1, {self.source_D}]")
        if len(set(self.indices)) != len(self.indices):
            raise ValidationError("selection contains duplicate channel indices")
        if any(i < 0 or i >= self.source_D for i in self.indices):
            raise ValidationError("selection index outside [0, source_D)")

    def to_json_dict(self) -> dict:
        return {"k": self.k, "source_D": self.source_D, "indices": list(self.indices)}

    @classmethod
    def from_json_dict(cls, obj: dict) -> "ChannelSelection":
        return cls(indices=[int(i) for i in obj["indices"]],
                   k=int(obj["k"]), source_D=int(obj["source_D"]))


@dataclass(frozen=True)
class Classifier:
    """Cosine classifier: unit-norm class rows, optionally channel-refined."""

    weights: EmbeddingMatrix
    class_names: list[str]
    selection: ChannelSelection | None = None

    def __post_init__(self):
        if len(self.class_names) != self.weights.n_rows:
            raise DimMismatch(
                f"{len(self.class_names)} class names for {self.weights.n_rows} weight rows"
            )
        if not self.weights.normalized:
            raise ValidationError("classifier rows must be L2-normalized")
        if self.selection is not None and self.selection.k != self.weights.n_cols:
            raise DimMismatch(
                f"selection keeps {self.selection.k} channels but weights have "
                f"{self.weights.n_cols} columns"
            )

    @property
    def n_classes(self) -> int:
        return self.weights.n_rows


def score_channels(embeddings: EmbeddingMatrix, lam: float) -> ChannelScore:
    """Compute per-channel S, V, O statistics over the class embeddings.

    Rows are normalized internally if the matrix is not already flagged
    normalized. The pairwise-product sum over ordered pairs i != j is
    computed as (sum_i x_i)^2 - sum_i x_i^2 per channel.
    """
    if embeddings.n_rows < 2:
        raise TooFewClasses(f"need at least 2 classes, got {embeddings.n_rows}")
    if not 0.0 <= lam <= 1.0:
        raise ValidationError(f"lambda must lie in [0, 1], got {lam}")
    m = embeddings if embeddings.normalized else tensorcore.l2_normalize_rows(embeddings)
    x = m.data
    n = x.shape[0]
    col_sum = x.sum(axis=0)
    col_sumsq = (x * x).sum(axis=0)
    S = (col_sum * col_sum - col_sumsq) / (n * (n - 1))
    mean = col_sum / n
    V = ((x - mean) ** 2).sum(axis=0) / n
    O = -lam * S + (1.0 - lam) * V
    return ChannelScore(S=S, V=V, O=O, lam=lam)


def select_top_k(score: ChannelScore, k: int) -> ChannelSelection:
    """Pick the k channels with the largest O, deterministically ordered."""
    d = score.n_channels
    if not 1 <= k <= d:
        raise KOutOfRange(f"k={k} outside [1, {d}]")
    order = sorted(range(d), key=lambda i: (-score.O[i], i))
    return ChannelSelection(indices=order[:k], k=k, source_D=d)


def build_refined_classifier(
    embeddings: EmbeddingMatrix,
    selection: ChannelSelection,
    class_names: list[str],
) -> Classifier:
    """Slice the class embeddings to the selected channels and renormalize rows.

    Renormalization is required because cosine scoring in the subspace needs
    unit rows again after columns are dropped.
    """
    if selection.source_D != embeddings.n_cols:
        raise DimMismatch(
            f"selection built for D={selection.source_D}, embeddings have "
            f"D={embeddings.n_cols}"
        )
    sliced = embeddings.data[:, selection.indices]
    weights = tensorcore.l2_normalize_rows(EmbeddingMatrix(sliced))
    return Classifier(weights=weights, class_names=list(class_names), selection=selection)


def build_naive_classifier(embeddings: EmbeddingMatrix, class_names: list[str]) -> Classifier:
    """Full-channel cosine classifier (rows normalized, no selection)."""
    weights = embeddings if embeddings.normalized else tensorcore.l2_normalize_rows(embeddings)
    weights = EmbeddingMatrix(weights.data, normalized=True)
    return Classifier(weights=weights, class_names=list(class_names), selection=None)


def classify(classifier: Classifier, query: np.ndarray) -> np.ndarray:
    """Cosine similarity of the query against every class row.

    The query is normalized internally; no softmax is applied, callers fuse
    or normalize the scores themselves.
    """
    query = np.asarray(query, dtype=np.float64)
    if query.ndim != 1 or query.shape[0] != classifier.weights.n_cols:
        raise DimMismatch(
            f"query length {query.shape} does not match classifier width "
            f"{classifier.weights.n_cols}"
        )
    q = tensorcore.normalize_vector(query)
    return classifier.weights.data @ q


def average_prompt_templates(per_template: list[EmbeddingMatrix]) -> EmbeddingMatrix:
    """Average one embedding matrix per prompt template into a single matrix.

    Each template matrix is row-normalized first, the matrices are averaged
    elementwise, and the result is row-normalized again.
    """
    if not per_template:
        raise EmptyTemplateList("need at least one template matrix")
    shape = per_template[0].data.shape
    labels = per_template[0].row_labels
    for m in per_template[1:]:
        if m.data.shape != shape:
            raise ShapeMismatch(f"template shapes differ: {m.data.shape} vs {shape}")
    acc = np.zeros(shape, dtype=np.float64)
    for m in per_template:
        acc += tensorcore.l2_normalize_rows(m).data
    acc /= len(per_template)
    return tensorcore.l2_normalize_rows(EmbeddingMatrix(acc, row_labels=labels))
