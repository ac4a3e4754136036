"""Cache bank of visual prototypes and prior-injected prediction.

The bank stores L2-normalized prototype embeddings as keys and one-hot
class labels as values. Seen classes contribute K ground-truth instance
embeddings each; every unseen class contributes its single highest-scoring
pseudo embedding replicated max(1, K // 2) times, so the unseen side holds
half a cache row-count per class. Prediction is similarity-weighted label
propagation, softmax(q . keys^T) @ values, and the prior-injected score adds
alpha times that probability vector to the text classifier's cosine scores.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import dec, tensorcore
from .errors import (
    ClassCountMismatch,
    DimMismatch,
    EmptyBank,
    InsufficientInstances,
    MissingUnseenClass,
    ValidationError,
)
from .tensorcore import EmbeddingMatrix

PROVENANCE_SEEN = "seen-groundtruth"
PROVENANCE_PSEUDO = "unseen-pseudo"


@dataclass(frozen=True)
class CacheBank:
    """Key matrix, one-hot values, and row provenance for prototype lookup."""

    keys: EmbeddingMatrix
    values: np.ndarray
    class_names: list[str]
    K: int
    P: int
    provenance: list[str]

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float64)
        rows = self.keys.n_rows
        n = len(self.class_names)
        if vals.shape != (rows, n):
            raise DimMismatch(f"values shape {vals.shape}, expected ({rows}, {n})")
        if not self.keys.normalized:
            raise ValidationError("cache keys must be L2-normalized")
        one = np.isclose(vals.sum(axis=1), 1.0)
        binary = np.all((vals == 0.0) | (vals == 1.0))
        if not (binary and np.all(one)):
            raise ValidationError("every values row must be one-hot")
        if len(self.provenance) != rows:
            raise DimMismatch(f"{len(self.provenance)} provenance tags for {rows} rows")
        if any(p not in (PROVENANCE_SEEN, PROVENANCE_PSEUDO) for p in self.provenance):
            raise ValidationError("unknown provenance tag")
        counts = vals.sum(axis=0)
        for c in range(n):
            rows_c = [i for i in range(rows) if vals[i, c] == 1.0]
            tags = {self.provenance[i] for i in rows_c}
            if len(tags) > 1:
                raise ValidationError(
                    f"class {self.class_names[c]!r} mixes seen and pseudo rows"
                )
            if tags == {PROVENANCE_SEEN} and counts[c] != self.K:
                raise ValidationError(
                    f"seen class {self.class_names[c]!r} has {int(counts[c])} rows, "
                    f"expected K={self.K}"
                )
            if tags == {PROVENANCE_PSEUDO} and counts[c] != self.P:
                raise ValidationError(
                    f"unseen class {self.class_names[c]!r} has {int(counts[c])} rows, "
                    f"expected P={self.P}"
                )
        vals = np.ascontiguousarray(vals)
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    @property
    def n_rows(self) -> int:
        return self.keys.n_rows

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    @property
    def dim(self) -> int:
        return self.keys.n_cols

    def seen_class_names(self) -> list[str]:
        have_seen = set()
        for i, tag in enumerate(self.provenance):
            if tag == PROVENANCE_SEEN:
                have_seen.add(int(np.argmax(self.values[i])))
        return [self.class_names[c] for c in sorted(have_seen)]


def build_seen_bank(
    instances: Mapping[str, Sequence[np.ndarray]],
    K: int,
    class_index_map: Mapping[str, int],
) -> CacheBank:
    """Stack the first K instance embeddings of every seen class into a bank.

    ``class_index_map`` fixes the one-hot column for every class (seen and
    unseen) and therefore the bank's class count N. Classes are laid out in
    ascending column order; within a class, rows keep the input order.
    """
    if K < 1:
        raise ValidationError(f"K must be >= 1, got {K}")
    n = len(class_index_map)
    names = [None] * n
    for name, idx in class_index_map.items():
        if not 0 <= idx < n or names[idx] is not None:
            raise ValidationError("class_index_map must be a bijection onto 0..N-1")
        names[idx] = name
    unknown = set(instances) - set(class_index_map)
    if unknown:
        raise ClassCountMismatch(f"instance classes not in class map: {sorted(unknown)}")

    key_rows = []
    value_rows = []
    provenance = []
    for name in sorted(instances, key=lambda c: class_index_map[c]):
        vecs = instances[name]
        if len(vecs) < K:
            raise InsufficientInstances(name, have=len(vecs), need=K)
        for v in vecs[:K]:
            key_rows.append(tensorcore.normalize_vector(np.asarray(v, dtype=np.float64)))
            one_hot = np.zeros(n)
            one_hot[class_index_map[name]] = 1.0
            value_rows.append(one_hot)
            provenance.append(PROVENANCE_SEEN)
    if not key_rows:
        raise EmptyBank("no seen classes provided")
    keys = EmbeddingMatrix(np.stack(key_rows), normalized=True)
    return CacheBank(
        keys=keys,
        values=np.stack(value_rows),
        class_names=names,
        K=K,
        P=0,
        provenance=provenance,
    )


def augment_unseen(
    bank: CacheBank,
    pseudo: Mapping[str, Sequence[tuple[np.ndarray, float]]],
    K: int,
) -> CacheBank:
    """Append pseudo prototypes for the unseen classes.

    Per unseen class the top-1 (embedding, score) pair is replicated
    max(1, K // 2) times, mirroring the rule of matching half the per-class
    cache size; P is derived from K, not a free parameter.
    """
    seen = set(bank.seen_class_names())
    unseen = [c for c in bank.class_names if c not in seen]
    p = max(1, K // 2)
    index_of = {c: i for i, c in enumerate(bank.class_names)}

    key_rows = [bank.keys.data[i] for i in range(bank.n_rows)]
    value_rows = [bank.values[i] for i in range(bank.n_rows)]
    provenance = list(bank.provenance)
    for name in unseen:
        entries = pseudo.get(name)
        if not entries:
            raise MissingUnseenClass(name)
        best = max(range(len(entries)), key=lambda i: (entries[i][1], -i))
        vec = tensorcore.normalize_vector(np.asarray(entries[best][0], dtype=np.float64))
        one_hot = np.zeros(bank.n_classes)
        one_hot[index_of[name]] = 1.0
        for _ in range(p):
            key_rows.append(vec)
            value_rows.append(one_hot)
            provenance.append(PROVENANCE_PSEUDO)
    keys = EmbeddingMatrix(np.stack(key_rows), normalized=True)
    return CacheBank(
        keys=keys,
        values=np.stack(value_rows),
        class_names=list(bank.class_names),
        K=bank.K,
        P=p,
        provenance=provenance,
    )


def cache_logits(bank: CacheBank, query: np.ndarray) -> np.ndarray:
    """Similarity-weighted label distribution: softmax(q . keys^T) @ values.

    The query is normalized internally; the output is a probability vector
    over the bank's N classes.
    """
    query = np.asarray(query, dtype=np.float64)
    if bank.n_rows == 0:
        raise EmptyBank("cache bank has no rows")
    if query.ndim != 1 or query.shape[0] != bank.dim:
        raise DimMismatch(f"query shape {query.shape}, bank dim {bank.dim}")
    q = tensorcore.normalize_vector(query)
    sims = bank.keys.data @ q
    return tensorcore.softmax(sims) @ bank.values


def prior_injected_logits(
    classifier: dec.Classifier,
    bank: CacheBank,
    query: np.ndarray,
    alpha: float,
) -> np.ndarray:
    """Text-classifier cosine scores plus alpha times the cache prediction.

    ``query`` is the full-dimensional pooled feature; when the classifier
    carries a channel selection the query is sliced to those channels for
    the text term while the cache term always sees the full vector.
    """
    query = np.asarray(query, dtype=np.float64)
    if classifier.n_classes != bank.n_classes:
        raise ClassCountMismatch(
            f"classifier has {classifier.n_classes} classes, bank has {bank.n_classes}"
        )
    if query.ndim != 1 or query.shape[0] != bank.dim:
        raise DimMismatch(f"query shape {query.shape}, bank dim {bank.dim}")
    if classifier.selection is not None:
        if classifier.selection.source_D != query.shape[0]:
            raise DimMismatch(
                f"classifier selection expects source_D={classifier.selection.source_D}, "
                f"query has {query.shape[0]}"
            )
        text_query = query[classifier.selection.indices]
    else:
        if classifier.weights.n_cols != query.shape[0]:
            raise DimMismatch(
                f"classifier width {classifier.weights.n_cols}, query has {query.shape[0]}"
            )
        text_query = query
    return dec.classify(classifier, text_query) + alpha * cache_logits(bank, query)


def save_bank(dirpath, bank: CacheBank) -> None:
    """Persist as a directory: keys.zemb, values.zemb, meta.json."""
    os.makedirs(dirpath, exist_ok=True)
    tensorcore.write_embeddings(os.path.join(dirpath, "keys.zemb"), bank.keys)
    tensorcore.write_zemb(os.path.join(dirpath, "values.zemb"), bank.values)
    meta = {
        "K": bank.K,
        "P": bank.P,
        "class_names": list(bank.class_names),
        "provenance": list(bank.provenance),
    }
    with open(os.path.join(dirpath, "meta.json"), "w", encoding="utf-8") as f:
        json.dump(meta, f, indent=2)
        f.write("\n")


def load_bank(dirpath) -> CacheBank:
    keys = tensorcore.read_embeddings(os.path.join(dirpath, "keys.zemb"))
    values, _ = tensorcore.read_zemb(os.path.join(dirpath, "values.zemb"))
    with open(os.path.join(dirpath, "meta.json"), "r", encoding="utf-8") as f:
        meta = json.load(f)
    keys = EmbeddingMatrix(keys.data, row_labels=keys.row_labels, normalized=True)
    return CacheBank(
        keys=keys,
        values=values.astype(np.float64),
        class_names=[str(c) for c in meta["class_names"]],
        K=int(meta["K"]),
        P=int(meta["P"]),
        provenance=[str(p) for p in meta["provenance"]],
    )
