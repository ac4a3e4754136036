"""Instance-segmentation metric engine for the seen/unseen protocols.

Implements mask IoU, greedy score-ordered matching, all-point interpolated
AP at IoU 0.5, Recall@100 at IoU thresholds {0.4, 0.5, 0.6}, and the
report-level aggregation: per-class values as fractions, seen/unseen means
and harmonic means as percentages.

Determinism rules used throughout: detections are processed in descending
score order with ties broken by input position, and greedy matching picks
the unmatched ground truth with the highest IoU, ties broken by the lower
ground-truth index.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Iterable, Mapping, Sequence

import numpy as np

from .errors import (
    BothEmpty,
    DimMismatch,
    EmptySplit,
    FormatError,
    NoGroundTruth,
    SplitMismatch,
    ValidationError,
)
from .tensorcore import BinaryMask, rle_decode, rle_encode

if TYPE_CHECKING:
    from .protocol import AnnotationSet, SeenUnseenSplit

RECALL_IOU_THRESHOLDS = (0.4, 0.5, 0.6)
RECALL_MAX_DETECTIONS = 100
AP_IOU_THRESHOLD = 0.5


@dataclass(frozen=True)
class InstanceAnnotation:
    """Ground-truth instance: image, class, pixel mask."""

    image_id: str
    class_id: int
    mask: BinaryMask
    is_crowd: bool = False

    def __post_init__(self):
        if self.class_id < 0:
            raise ValidationError(f"class_id must be non-negative, got {self.class_id}")
        if self.is_crowd:
            raise ValidationError("crowd regions are not supported")


@dataclass(frozen=True)
class Detection:
    """Predicted instance with a confidence score."""

    image_id: str
    class_id: int
    score: float
    mask: BinaryMask

    def __post_init__(self):
        if not np.isfinite(self.score):
            raise ValidationError(f"detection score must be finite, got {self.score}")


@dataclass
class EvalReport:
    """Per-class metrics plus seen/unseen aggregates.

    ``per_class_ap`` and ``per_class_recall`` hold fractions in [0, 1] and
    only cover classes with at least one ground-truth instance. Aggregate
    fields are percentages; seen-side fields and harmonic means are None
    under the unseen-only protocol or when the seen side has no ground truth.
    """

    protocol: str
    per_class_ap: dict[int, float]
    per_class_recall: dict[tuple[int, float], float]
    per_class_gt: dict[int, int]
    map_seen: float | None
    map_unseen: float | None
    hm_map: float | None
    recall_seen: float | None
    recall_unseen: float | None
    hm_recall: float | None
    class_names: list[str] = field(default_factory=list)
    seen_class_ids: list[int] = field(default_factory=list)
    unseen_class_ids: list[int] = field(default_factory=list)
    pr_curves: dict[int, tuple[list[float], list[float]]] = field(default_factory=dict)

    def to_json_dict(self) -> dict:
        recall_nested: dict[str, dict[str, float]] = {}
        for (cid, thr), r in sorted(self.per_class_recall.items()):
            recall_nested.setdefault(str(cid), {})[f"{thr:g}"] = r
        return {
            "protocol": self.protocol,
            "class_names": list(self.class_names),
            "seen_class_ids": list(self.seen_class_ids),
            "unseen_class_ids": list(self.unseen_class_ids),
            "per_class_ap": {str(c): v for c, v in sorted(self.per_class_ap.items())},
            "per_class_recall": recall_nested,
            "per_class_gt": {str(c): v for c, v in sorted(self.per_class_gt.items())},
            "map_seen": self.map_seen,
            "map_unseen": self.map_unseen,
            "hm_map": self.hm_map,
            "recall_seen": self.recall_seen,
            "recall_unseen": self.recall_unseen,
            "hm_recall": self.hm_recall,
        }


def mask_iou(a: BinaryMask, b: BinaryMask) -> float:
    """Intersection over union of two masks of equal shape."""
    if a.shape != b.shape:
        raise DimMismatch(f"mask shapes differ: {a.shape} vs {b.shape}")
    inter = int(np.count_nonzero(a.bits & b.bits))
    union = int(np.count_nonzero(a.bits | b.bits))
    if union == 0:
        raise BothEmpty("both masks are empty")
    return inter / union


def match_greedy(
    dets: Sequence[Detection],
    gts: Sequence[InstanceAnnotation],
    iou_thr: float,
) -> list[tuple[int, int | None]]:
    """Greedy one-to-one matching for a single class on a single image.

    ``dets`` must already be sorted by descending score (ties by input
    order); each detection takes the unmatched ground truth with the highest
    IoU at or above the threshold, lower index winning IoU ties.
    """
    taken: set[int] = set()
    out: list[tuple[int, int | None]] = []
    for di, det in enumerate(dets):
        best_iou = 0.0
        best_gi: int | None = None
        for gi, gt in enumerate(gts):
            if gi in taken:
                continue
            iou = mask_iou(det.mask, gt.mask)
            if iou >= iou_thr and iou > best_iou:
                best_iou = iou
                best_gi = gi
        if best_gi is not None:
            taken.add(best_gi)
        out.append((di, best_gi))
    return out


def _score_order(dets: Sequence[Detection]) -> list[int]:
    return sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))


def _match_flags(
    dets: Sequence[Detection],
    gts: Sequence[InstanceAnnotation],
    iou_thr: float,
) -> list[bool]:
    """True-positive flag per detection in global score order.

    Detections and ground truths may span multiple images; matching is
    per-image but the score ordering is global, so pooled precision/recall
    curves come out right.
    """
    gts_by_image: dict[str, list[int]] = {}
    for gi, gt in enumerate(gts):
        gts_by_image.setdefault(gt.image_id, []).append(gi)
    taken: set[int] = set()
    flags = []
    for di in _score_order(dets):
        det = dets[di]
        best_iou = 0.0
        best_gi = None
        for gi in gts_by_image.get(det.image_id, ()):
            if gi in taken:
                continue
            iou = mask_iou(det.mask, gts[gi].mask)
            if iou >= iou_thr and iou > best_iou:
                best_iou = iou
                best_gi = gi
        if best_gi is not None:
            taken.add(best_gi)
            flags.append(True)
        else:
            flags.append(False)
    return flags


def pr_curve(
    dets: Sequence[Detection],
    gts: Sequence[InstanceAnnotation],
    iou_thr: float = AP_IOU_THRESHOLD,
) -> tuple[list[float], list[float]]:
    """Pooled (recall, precision) points in descending-score order, one per detection."""
    if not gts:
        raise NoGroundTruth("no ground-truth instances for this class")
    flags = _match_flags(dets, gts, iou_thr)
    recalls: list[float] = []
    precisions: list[float] = []
    tp = 0
    for rank, flag in enumerate(flags, start=1):
        if flag:
            tp += 1
        precisions.append(tp / rank)
        recalls.append(tp / len(gts))
    return recalls, precisions


def average_precision(
    dets: Sequence[Detection],
    gts: Sequence[InstanceAnnotation],
    iou_thr: float = AP_IOU_THRESHOLD,
) -> float:
    """All-point interpolated AP for one class pooled over images.

    The precision curve is made monotone non-increasing from the right (the
    precision envelope) and integrated over recall. Plain Python arithmetic
    keeps the result reproducible against a loop-based reference.
    """
    recalls, precisions = pr_curve(dets, gts, iou_thr)
    if not recalls:
        return 0.0
    mrec = [0.0] + recalls + [1.0]
    mpre = [0.0] + precisions + [0.0]
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    ap = 0.0
    for i in range(len(mrec) - 1):
        if mrec[i + 1] != mrec[i]:
            ap += (mrec[i + 1] - mrec[i]) * mpre[i + 1]
    return ap


def _truncate_top_scores(
    dets: Sequence[Detection], max_dets: int = RECALL_MAX_DETECTIONS
) -> list[Detection]:
    """Keep the top ``max_dets`` detections per image regardless of class."""
    by_image: dict[str, list[int]] = {}
    for i, d in enumerate(dets):
        by_image.setdefault(d.image_id, []).append(i)
    keep: list[int] = []
    for ids in by_image.values():
        ranked = sorted(ids, key=lambda i: (-dets[i].score, i))
        keep.extend(ranked[:max_dets])
    keep.sort()
    return [dets[i] for i in keep]


def _recall_matched_counts(
    dets: Sequence[Detection],
    gts: Sequence[InstanceAnnotation],
    iou_thrs: Iterable[float],
) -> dict[float, dict[int, tuple[int, int]]]:
    """Per threshold, per class: (matched ground truths, total ground truths).

    Detections are truncated to the top 100 per image class-agnostically
    before per-class matching.
    """
    kept = _truncate_top_scores(dets)
    class_ids = sorted({g.class_id for g in gts})
    out: dict[float, dict[int, tuple[int, int]]] = {}
    for thr in iou_thrs:
        per_class: dict[int, tuple[int, int]] = {}
        for cid in class_ids:
            gts_c = [g for g in gts if g.class_id == cid]
            dets_c = [d for d in kept if d.class_id == cid]
            flags = _match_flags(dets_c, gts_c, thr)
            per_class[cid] = (sum(flags), len(gts_c))
        out[thr] = per_class
    return out


def recall_at_100(
    dets: Sequence[Detection],
    gts: Sequence[InstanceAnnotation],
    iou_thrs: Iterable[float] = RECALL_IOU_THRESHOLDS,
) -> dict[float, float]:
    """Fraction of all ground truths matched within the top-100 detections per image."""
    if not gts:
        raise NoGroundTruth("no ground-truth instances")
    counts = _recall_matched_counts(dets, gts, iou_thrs)
    out = {}
    for thr, per_class in counts.items():
        matched = sum(m for m, _ in per_class.values())
        total = sum(t for _, t in per_class.values())
        out[thr] = matched / total
    return out


def harmonic_mean(a: float, b: float) -> float:
    """2ab / (a + b), defined as 0 when both inputs are 0."""
    if a < 0 or b < 0:
        raise ValidationError("harmonic mean inputs must be non-negative")
    if a + b == 0:
        return 0.0
    return 2.0 * a * b / (a + b)


def _mean(values: list[float]) -> float:
    total = 0.0
    for v in values:
        total += v
    return total / len(values)


def evaluate(
    dets: Sequence[Detection],
    gts: "AnnotationSet",
    split: "SeenUnseenSplit",
    protocol: str,
) -> EvalReport:
    """Full report for either protocol.

    Under the unseen-only protocol ("ZSRI") seen-class detections are
    discarded and ground truth is restricted to unseen classes before any
    metric is computed; the generalized protocol ("GZSRI") uses everything.
    Classes without ground truth are excluded from per-class maps and means.
    """
    if protocol not in ("ZSRI", "GZSRI"):
        raise ValidationError(f"protocol must be 'ZSRI' or 'GZSRI', got {protocol!r}")
    categories = list(gts.categories)
    name_to_id = {n: i for i, n in enumerate(categories)}
    missing = [c for c in (*split.seen, *split.unseen) if c not in name_to_id]
    if missing:
        raise SplitMismatch(f"split classes absent from categories: {missing}")
    seen_ids = sorted(name_to_id[c] for c in split.seen)
    unseen_ids = sorted(name_to_id[c] for c in split.unseen)

    annotations = list(gts.annotations)
    detections = list(dets)
    if protocol == "ZSRI":
        keep = set(unseen_ids)
        annotations = [a for a in annotations if a.class_id in keep]
        detections = [d for d in detections if d.class_id in keep]

    gt_counts: dict[int, int] = {}
    for a in annotations:
        gt_counts[a.class_id] = gt_counts.get(a.class_id, 0) + 1
    eligible = sorted(gt_counts)
    if not eligible:
        raise EmptySplit("no class has ground-truth instances under this protocol")

    per_class_ap: dict[int, float] = {}
    pr_curves: dict[int, tuple[list[float], list[float]]] = {}
    for cid in eligible:
        dets_c = [d for d in detections if d.class_id == cid]
        gts_c = [a for a in annotations if a.class_id == cid]
        per_class_ap[cid] = average_precision(dets_c, gts_c, AP_IOU_THRESHOLD)
        pr_curves[cid] = pr_curve(dets_c, gts_c, AP_IOU_THRESHOLD)

    counts = _recall_matched_counts(detections, annotations, RECALL_IOU_THRESHOLDS)
    per_class_recall: dict[tuple[int, float], float] = {}
    for thr in RECALL_IOU_THRESHOLDS:
        for cid, (matched, total) in counts[thr].items():
            per_class_recall[(cid, thr)] = matched / total

    def aggregate(metric: Mapping[int, float], ids: list[int]) -> float | None:
        vals = [metric[c] for c in ids if c in metric]
        if not vals:
            return None
        return 100.0 * _mean(vals)

    recall_05 = {cid: per_class_recall[(cid, 0.5)] for cid in eligible}
    if protocol == "ZSRI":
        map_seen = recall_seen = hm_map = hm_recall = None
        map_unseen = aggregate(per_class_ap, unseen_ids)
        recall_unseen = aggregate(recall_05, unseen_ids)
    else:
        map_seen = aggregate(per_class_ap, seen_ids)
        map_unseen = aggregate(per_class_ap, unseen_ids)
        recall_seen = aggregate(recall_05, seen_ids)
        recall_unseen = aggregate(recall_05, unseen_ids)
        hm_map = (
            harmonic_mean(map_seen, map_unseen)
            if map_seen is not None and map_unseen is not None
            else None
        )
        hm_recall = (
            harmonic_mean(recall_seen, recall_unseen)
            if recall_seen is not None and recall_unseen is not None
            else None
        )

    return EvalReport(
        protocol=protocol,
        per_class_ap=per_class_ap,
        per_class_recall=per_class_recall,
        per_class_gt=gt_counts,
        map_seen=map_seen,
        map_unseen=map_unseen,
        hm_map=hm_map,
        recall_seen=recall_seen,
        recall_unseen=recall_unseen,
        hm_recall=hm_recall,
        class_names=categories,
        seen_class_ids=seen_ids,
        unseen_class_ids=unseen_ids,
        pr_curves=pr_curves,
    )


# ---------------------------------------------------------------------------
# Detections interchange: one JSON object per line.

def detection_to_json_dict(det: Detection) -> dict:
    h, w = det.mask.shape
    return {
        "image_id": det.image_id,
        "class_id": det.class_id,
        "score": det.score,
        "mask": {"h": h, "w": w, "rle": rle_encode(det.mask)},
    }


def detection_from_json_dict(obj: dict) -> Detection:
    try:
        m = obj["mask"]
        mask = rle_decode(int(m["h"]), int(m["w"]), [int(c) for c in m["rle"]])
        return Detection(
            image_id=str(obj["image_id"]),
            class_id=int(obj["class_id"]),
            score=float(obj["score"]),
            mask=mask,
        )
    except (KeyError, TypeError) as e:
        raise FormatError(f"malformed detection record: {e}") from e


def write_detections(path, dets: Sequence[Detection]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for d in dets:
            f.write(json.dumps(detection_to_json_dict(d), separators=(",", ":")))
            f.write("\n")


def read_detections(path) -> list[Detection]:
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
            out.append(detection_from_json_dict(obj))
    return out
