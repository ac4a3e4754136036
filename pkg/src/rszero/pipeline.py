"""Per-proposal prediction: pooling, prior injection, ensemble, detections.

A proposal carries a mask, an objectness-style score, and the class
embedding produced by the mask generator. Its in-vocabulary logits come
from classifying that embedding; its out-of-vocabulary logits come from
mask-pooling the backbone feature map and running the prior-injected
prediction. The two branches are softmaxed and fused geometrically, and the
detection score is the proposal score times the fused class probability.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import cachebank, dec, ensemble, tensorcore
from .errors import DimMismatch, FormatError, ValidationError
from .evaluation import Detection
from .tensorcore import BinaryMask, FeatureMap, rle_decode, rle_encode


@dataclass(frozen=True)
class Proposal:
    """Predicted instance candidate prior to classification."""

    image_id: str
    score: float
    mask: BinaryMask
    embedding: np.ndarray
    true_class_id: int | None = None

    def __post_init__(self):
        e = np.asarray(self.embedding, dtype=np.float64)
        if e.ndim != 1 or e.shape[0] < 1:
            raise DimMismatch("proposal embedding must be a non-empty vector")
        if not np.all(np.isfinite(e)):
            raise ValidationError("proposal embedding contains NaN or Inf")
        e = np.ascontiguousarray(e)
        e.setflags(write=False)
        object.__setattr__(self, "embedding", e)


def in_vocab_logits(classifier: dec.Classifier, proposal: Proposal) -> np.ndarray:
    """Cosine scores of the proposal's class embedding.

    Full-dimensional embeddings are sliced to the classifier's channel
    selection; embeddings already in the refined width pass through.
    """
    emb = proposal.embedding
    sel = classifier.selection
    if sel is not None and emb.shape[0] == sel.source_D and sel.k != sel.source_D:
        emb = emb[sel.indices]
    return dec.classify(classifier, emb)


def out_of_vocab_logits(
    fm: FeatureMap,
    proposal: Proposal,
    classifier: dec.Classifier,
    bank: cachebank.CacheBank | None,
    alpha: float,
) -> np.ndarray:
    """Prior-injected logits of the mask-pooled backbone feature.

    Without a cache bank this degrades to the plain text-classifier score of
    the pooled feature (equivalent to alpha = 0).
    """
    pooled = tensorcore.mask_pool(fm, proposal.mask)
    if bank is not None:
        return cachebank.prior_injected_logits(classifier, bank, pooled, alpha)
    if classifier.selection is not None:
        pooled = pooled[classifier.selection.indices]
    return dec.classify(classifier, pooled)


def predict_scene(
    fm: FeatureMap,
    proposals: Sequence[Proposal],
    classifier: dec.Classifier,
    bank: cachebank.CacheBank | None,
    alpha: float,
    ens_cfg: ensemble.EnsembleConfig,
    temperature: float,
) -> list[Detection]:
    """Classify every proposal of one image into a detection."""
    out = []
    for p in proposals:
        z_in = in_vocab_logits(classifier, p)
        z_out = out_of_vocab_logits(fm, p, classifier, bank, alpha)
        cls, prob = ensemble.final_prediction(z_in, z_out, ens_cfg, temperature)
        out.append(
            Detection(
                image_id=p.image_id,
                class_id=cls,
                score=p.score * prob,
                mask=p.mask,
            )
        )
    return out


def mine_pseudo_samples(
    scenes: Sequence[tuple[FeatureMap, Sequence[Proposal]]],
    classifier: dec.Classifier,
    class_names: Sequence[str],
    unseen_names: Sequence[str],
    temperature: float,
) -> dict[str, list[tuple[np.ndarray, float]]]:
    """Collect scored pooled features as pseudo-sample candidates per unseen class.

    Every proposal's pooled feature is scored with the text classifier only
    (no cache yet) and recorded against each unseen class with the softmax
    probability it assigns to that class; the bank builder keeps the top-1.
    """
    index_of = {n: i for i, n in enumerate(class_names)}
    out: dict[str, list[tuple[np.ndarray, float]]] = {n: [] for n in unseen_names}
    for fm, proposals in scenes:
        for p in proposals:
            pooled = tensorcore.mask_pool(fm, p.mask)
            sliced = (
                pooled[classifier.selection.indices]
                if classifier.selection is not None
                else pooled
            )
            probs = tensorcore.softmax(dec.classify(classifier, sliced) / temperature)
            for name in unseen_names:
                out[name].append((pooled, float(probs[index_of[name]])))
    return out


def pool_seen_instances(
    scenes: Sequence[tuple[FeatureMap, Sequence["object"]]],
    seen_ids: Mapping[int, str],
) -> dict[str, list[np.ndarray]]:
    """Mask-pool ground-truth instances of seen classes, keeping input order."""
    out: dict[str, list[np.ndarray]] = {name: [] for name in seen_ids.values()}
    for fm, annotations in scenes:
        for ann in annotations:
            name = seen_ids.get(ann.class_id)
            if name is not None:
                out[name].append(tensorcore.mask_pool(fm, ann.mask))
    return out


# ---------------------------------------------------------------------------
# Proposal interchange: one JSON object per line.

def proposal_to_json_dict(p: Proposal) -> dict:
    h, w = p.mask.shape
    return {
        "image_id": p.image_id,
        "score": p.score,
        "mask": {"h": h, "w": w, "rle": rle_encode(p.mask)},
        "embedding": [float(x) for x in p.embedding],
        "true_class_id": p.true_class_id,
    }


def proposal_from_json_dict(obj: dict) -> Proposal:
    try:
        m = obj["mask"]
        mask = rle_decode(int(m["h"]), int(m["w"]), [int(c) for c in m["rle"]])
        true_cls = obj.get("true_class_id")
        return Proposal(
            image_id=str(obj["image_id"]),
            score=float(obj["score"]),
            mask=mask,
            embedding=np.asarray(obj["embedding"], dtype=np.float64),
            true_class_id=None if true_cls is None else int(true_cls),
        )
    except (KeyError, TypeError) as e:
        raise FormatError(f"malformed proposal record: {e}") from e


def write_proposals(path, proposals: Sequence[Proposal]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for p in proposals:
            f.write(json.dumps(proposal_to_json_dict(p), separators=(",", ":")))
            f.write("\n")


def read_proposals(path) -> list[Proposal]:
    out = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise FormatError(f"line {lineno} is not valid JSON: {e}") from e
            out.append(proposal_from_json_dict(obj))
    return out
