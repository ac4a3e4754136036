"""Seen/unseen class splits and zero-shot annotation filtering.

Training files keep only seen-class annotations and drop every image that
contains any unseen object, so no unseen pixels leak into training. Test
files are either left intact (generalized protocol) or restricted to
unseen-class annotations (unseen-only protocol).
"""

from __future__ import annotations

import json
from dataclasses import dataclass

from .errors import FormatError, SplitMismatch, UnknownDataset, ValidationError
from .evaluation import InstanceAnnotation
from .tensorcore import rle_decode, rle_encode

BUILTIN_SPLITS: dict[str, dict[str, list[str]]] = {
    "isaid": {
        "seen": [
            "ship",
            "storage tank",
            "baseball diamond",
            "basketball court",
            "ground track field",
            "bridge",
            "large vehicle",
            "small vehicle",
            "roundabout",
            "plane",
            "harbor",
        ],
        "unseen": ["tennis court", "helicopter", "swimming pool", "soccer ball field"],
    },
    "nwpu": {
        "seen": [
            "airplane",
            "storage tank",
            "baseball diamond",
            "tennis court",
            "ground track field",
            "bridge",
            "vehicle",
        ],
        "unseen": ["ship", "basketball court", "harbor"],
    },
    "sior": {
        "seen": [
            "airplane",
            "baseball field",
            "bridge",
            "chimney",
            "dam",
            "expressway service area",
            "expressway toll station",
            "golf field",
            "harbor",
            "overpass",
            "ship",
            "stadium",
            "storage tank",
            "tennis court",
            "train station",
            "vehicle",
        ],
        "unseen": ["airport", "basketball court", "ground track field", "windmill"],
    },
}


@dataclass(frozen=True)
class SeenUnseenSplit:
    dataset_name: str
    seen: list[str]
    unseen: list[str]

    def __post_init__(self):
        overlap = set(self.seen) & set(self.unseen)
        if overlap:
            raise ValidationError(f"seen and unseen classes overlap: {sorted(overlap)}")
        if not self.seen and not self.unseen:
            raise ValidationError("split has no classes")

    @property
    def all_classes(self) -> list[str]:
        return [*self.seen, *self.unseen]


@dataclass(frozen=True)
class AnnotationSet:
    """COCO-style subset: images, instance annotations, ordered category names."""

    images: list[tuple[str, int, int]]
    annotations: list[InstanceAnnotation]
    categories: list[str]

    def __post_init__(self):
        image_ids = {i[0] for i in self.images}
        if len(image_ids) != len(self.images):
            raise ValidationError("duplicate image ids")
        n = len(self.categories)
        for a in self.annotations:
            if a.image_id not in image_ids:
                raise ValidationError(f"annotation references unknown image {a.image_id!r}")
            if not 0 <= a.class_id < n:
                raise ValidationError(f"annotation category {a.class_id} outside [0, {n})")


def builtin_split(name: str) -> SeenUnseenSplit:
    """Return the fixed benchmark split for 'isaid', 'nwpu', or 'sior'."""
    key = name.lower()
    if key not in BUILTIN_SPLITS:
        raise UnknownDataset(name)
    entry = BUILTIN_SPLITS[key]
    return SeenUnseenSplit(dataset_name=key, seen=list(entry["seen"]), unseen=list(entry["unseen"]))


def load_split(obj: dict, dataset_name: str = "custom") -> SeenUnseenSplit:
    """Build a split from a JSON object {"seen": [...], "unseen": [...]}."""
    try:
        seen = [str(c) for c in obj["seen"]]
        unseen = [str(c) for c in obj["unseen"]]
    except (KeyError, TypeError) as e:
        raise FormatError(f"split JSON must provide 'seen' and 'unseen' lists: {e}") from e
    return SeenUnseenSplit(dataset_name=dataset_name, seen=seen, unseen=unseen)


def _check_split_classes(aset: AnnotationSet, split: SeenUnseenSplit) -> None:
    missing = [c for c in split.all_classes if c not in aset.categories]
    if missing:
        raise SplitMismatch(f"split classes absent from annotation categories: {missing}")


def filter_train(aset: AnnotationSet, split: SeenUnseenSplit) -> AnnotationSet:
    """Zero-shot training filter.

    Removes unseen-class annotations, discards every image that contained
    one, and reindexes categories to the seen classes (original order kept).
    """
    _check_split_classes(aset, split)
    name_to_id = {n: i for i, n in enumerate(aset.categories)}
    unseen_ids = {name_to_id[c] for c in split.unseen}
    contaminated = {a.image_id for a in aset.annotations if a.class_id in unseen_ids}

    new_categories = [c for c in aset.categories if c not in set(split.unseen)]
    remap = {name_to_id[c]: i for i, c in enumerate(new_categories)}

    images = [img for img in aset.images if img[0] not in contaminated]
    annotations = [
        InstanceAnnotation(
            image_id=a.image_id,
            class_id=remap[a.class_id],
            mask=a.mask,
        )
        for a in aset.annotations
        if a.image_id not in contaminated and a.class_id in remap
    ]
    return AnnotationSet(images=images, annotations=annotations, categories=new_categories)


def filter_test(aset: AnnotationSet, split: SeenUnseenSplit, protocol: str) -> AnnotationSet:
    """Test-time filter: identity for 'GZSRI', unseen-only annotations for 'ZSRI'.

    Images and the category list are kept either way so class ids stay
    aligned with detection files.
    """
    _check_split_classes(aset, split)
    if protocol == "GZSRI":
        return AnnotationSet(
            images=list(aset.images),
            annotations=list(aset.annotations),
            categories=list(aset.categories),
        )
    if protocol != "ZSRI":
        raise ValidationError(f"protocol must be 'ZSRI' or 'GZSRI', got {protocol!r}")
    name_to_id = {n: i for i, n in enumerate(aset.categories)}
    unseen_ids = {name_to_id[c] for c in split.unseen}
    annotations = [a for a in aset.annotations if a.class_id in unseen_ids]
    return AnnotationSet(
        images=list(aset.images),
        annotations=annotations,
        categories=list(aset.categories),
    )


def train_file_name(split: SeenUnseenSplit) -> str:
    return f"{split.dataset_name}_seen_{len(split.seen)}_{len(split.unseen)}_train.json"


def gzsri_file_name(split: SeenUnseenSplit) -> str:
    return f"{split.dataset_name}_gzsri_val.json"


def zsri_file_name(split: SeenUnseenSplit) -> str:
    return f"{split.dataset_name}_unseen_{len(split.seen)}_{len(split.unseen)}_val.json"


# ---------------------------------------------------------------------------
# Annotation JSON I/O (COCO-style subset with run-length masks).

def annotation_set_to_json_dict(aset: AnnotationSet) -> dict:
    return {
        "images": [{"id": i, "width": w, "height": h} for i, w, h in aset.images],
        "annotations": [
            {
                "id": k,
                "image_id": a.image_id,
                "category_id": a.class_id,
                "mask": {
                    "h": a.mask.shape[0],
                    "w": a.mask.shape[1],
                    "rle": rle_encode(a.mask),
                },
            }
            for k, a in enumerate(aset.annotations)
        ],
        "categories": [{"id": i, "name": n} for i, n in enumerate(aset.categories)],
    }


def annotation_set_from_json_dict(obj: dict) -> AnnotationSet:
    try:
        categories_raw = sorted(obj["categories"], key=lambda c: int(c["id"]))
        ids = [int(c["id"]) for c in categories_raw]
        if ids != list(range(len(ids))):
            raise FormatError(f"category ids must be contiguous from 0, got {ids}")
        categories = [str(c["name"]) for c in categories_raw]
        images = [
            (str(i["id"]), int(i["width"]), int(i["height"])) for i in obj["images"]
        ]
        annotations = []
        for a in obj["annotations"]:
            m = a["mask"]
            mask = rle_decode(int(m["h"]), int(m["w"]), [int(c) for c in m["rle"]])
            annotations.append(
                InstanceAnnotation(
                    image_id=str(a["image_id"]),
                    class_id=int(a["category_id"]),
                    mask=mask,
                )
            )
    except (KeyError, TypeError) as e:
        raise FormatError(f"malformed annotation file: {e}") from e
    return AnnotationSet(images=images, annotations=annotations, categories=categories)


def save_annotations(path, aset: AnnotationSet) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(annotation_set_to_json_dict(aset), f, separators=(",", ":"))
        f.write("\n")


def load_annotations(path) -> AnnotationSet:
    with open(path, "r", encoding="utf-8") as f:
        try:
            obj = json.load(f)
        except json.JSONDecodeError as e:
            raise FormatError(f"annotation file is not valid JSON: {e}") from e
    return annotation_set_from_json_dict(obj)
