"""Extraction jobs: prompt text and image crops into ZEMB files."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image, UnidentifiedImageError

from .encoders import load_encoder
from .errors import BadCrop, EmptyClassList, ManifestError
from .zemb import write_zemb


@dataclass(frozen=True)
class CropSpec:
    image: str
    box: tuple[int, int, int, int]  # x, y, w, h
    class_name: str


@dataclass(frozen=True)
class ExtractionJob:
    model: str
    templates: list[str]
    class_names: list[str] = field(default_factory=list)
    crops: list[CropSpec] = field(default_factory=list)

    def __post_init__(self):
        if not self.templates:
            raise ManifestError("template list must not be empty")


def read_manifest(path) -> list[CropSpec]:
    """Crop manifest: JSON lines {"image": path, "box": [x,y,w,h], "class": name}."""
    crops = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                box = tuple(int(v) for v in obj["box"])
                if len(box) != 4:
                    raise ValueError(f"box must have 4 entries, got {len(box)}")
                crops.append(
                    CropSpec(image=str(obj["image"]), box=box, class_name=str(obj["class"]))
                )
            except (KeyError, TypeError, ValueError, json.JSONDecodeError) as e:
                raise ManifestError(f"manifest line {lineno}: {e}") from e
    return crops


def template_file_name(index: int) -> str:
    return f"template_{index:02d}.zemb"


def extract_text(job: ExtractionJob, out_dir) -> list[str]:
    """Encode every (template, class) pair.

    Writes one N x D matrix per template (labels are the class names) plus
    an ``averaged.zemb`` with the per-class mean of the L2-normalized
    template embeddings, renormalized. Returns the written paths.
    """
    if not job.class_names:
        raise EmptyClassList("no class names to encode")
    encoder = load_encoder(job.model)
    os.makedirs(out_dir, exist_ok=True)
    written = []
    total = np.zeros((len(job.class_names), encoder.dim))
    for t_index, template in enumerate(job.templates):
        rows = np.stack(
            [encoder.encode_text(template.format(name)) for name in job.class_names]
        )
        path = os.path.join(out_dir, template_file_name(t_index))
        write_zemb(path, rows, labels=list(job.class_names))
        written.append(path)
        total += rows
    mean = total / len(job.templates)
    mean = mean / np.linalg.norm(mean, axis=1, keepdims=True)
    avg_path = os.path.join(out_dir, "averaged.zemb")
    write_zemb(avg_path, mean, labels=list(job.class_names))
    written.append(avg_path)
    return written


def _load_crop(spec: CropSpec, index: int) -> Image.Image:
    try:
        with Image.open(spec.image) as img:
            img.load()
            x, y, w, h = spec.box
            if w < 1 or h < 1:
                raise BadCrop(index, f"degenerate box {spec.box}")
            if x < 0 or y < 0 or x + w > img.width or y + h > img.height:
                raise BadCrop(
                    index,
                    f"box {spec.box} outside image {img.width}x{img.height}",
                )
            return img.crop((x, y, x + w, y + h))
    except FileNotFoundError as e:
        raise BadCrop(index, f"missing image file: {e}") from e
    except UnidentifiedImageError as e:
        raise BadCrop(index, f"undecodable image: {e}") from e


def extract_crops(job: ExtractionJob, out_path) -> str:
    """Encode every manifest crop into one row; row order follows the manifest.

    Labels are synthetic instance ids (``crop-00000``, ...); the manifest
    remains the source of each row's class name.
    """
    if not job.crops:
        raise ManifestError("no crops to encode")
    encoder = load_encoder(job.model)
    rows = []
    labels = []
    for index, spec in enumerate(job.crops):
        crop = _load_crop(spec, index)
        rows.append(encoder.encode_image(crop))
        labels.append(f"crop-{index:05d}")
    write_zemb(out_path, np.stack(rows), labels=labels)
    return str(out_path)
