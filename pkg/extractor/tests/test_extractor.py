import json

import numpy as np
import pytest
from PIL import Image

from zembx import (
    CropSpec,
    ExtractionJob,
    RESISC45_TEMPLATES,
    extract_crops,
    extract_text,
    read_manifest,
)
from zembx.cli import main as zembx_main
from zembx.encoders import load_encoder
from zembx.errors import BadCrop, EmptyClassList, ModelLoadError

# the consumer side: these imports appear in tests only, the bridge itself
# talks to the toolkit purely through ZEMB/manifest files
from rszero import cachebank, tensorcore

CLASSES = ["ship", "harbor", "swimming pool", "tennis court"]
MODEL = "hash-v1-64"


def make_images(tmp_path, n=3, size=48):
    paths = []
    rng = np.random.default_rng(7)
    for i in range(n):
        pixels = rng.integers(0, 255, size=(size, size, 3), dtype=np.uint8)
        path = tmp_path / f"img{i}.png"
        Image.fromarray(pixels, "RGB").save(path)
        paths.append(path)
    return paths


def make_manifest(tmp_path, images, per_class=2):
    path = tmp_path / "manifest.jsonl"
    rng = np.random.default_rng(8)
    with open(path, "w", encoding="utf-8") as f:
        for name in CLASSES:
            for _ in range(per_class):
                img = images[int(rng.integers(len(images)))]
                x, y = int(rng.integers(0, 24)), int(rng.integers(0, 24))
                record = {"image": str(img), "box": [x, y, 16, 16], "class": name}
                f.write(json.dumps(record) + "\n")
    return path


class TestEncoders:
    def test_unknown_model_rejected(self):
        with pytest.raises(ModelLoadError):
            load_encoder("resnet-50")

    def test_text_self_cosine_is_one(self):
        enc = load_encoder(MODEL)
        a = enc.encode_text("satellite imagery of ship.")
        b = enc.encode_text("satellite imagery of ship.")
        assert float(a @ b) == pytest.approx(1.0, abs=1e-12)

    def test_distinct_classes_distinct_embeddings(self):
        enc = load_encoder(MODEL)
        a = enc.encode_text("satellite imagery of ship.")
        b = enc.encode_text("satellite imagery of harbor.")
        assert float(a @ b) < 0.999

    def test_image_encoding_deterministic(self, tmp_path):
        enc = load_encoder(MODEL)
        (path,) = make_images(tmp_path, n=1)
        with Image.open(path) as img:
            v1 = enc.encode_image(img)
        with Image.open(path) as img:
            v2 = enc.encode_image(img)
        assert np.array_equal(v1, v2)


class TestExtractText:
    def test_rejects_empty_class_list(self, tmp_path):
        job = ExtractionJob(model=MODEL, templates=["{}"], class_names=[])
        with pytest.raises(EmptyClassList):
            extract_text(job, tmp_path / "out")

    def test_repeated_runs_are_byte_identical(self, tmp_path):
        job = ExtractionJob(model=MODEL, templates=RESISC45_TEMPLATES, class_names=CLASSES)
        out1 = tmp_path / "o1"
        out2 = tmp_path / "o2"
        paths1 = extract_text(job, out1)
        paths2 = extract_text(job, out2)
        assert len(paths1) == len(RESISC45_TEMPLATES) + 1
        for p1, p2 in zip(paths1, paths2):
            assert open(p1, "rb").read() == open(p2, "rb").read()

    def test_files_load_in_primary_reader_with_unit_rows(self, tmp_path):
        job = ExtractionJob(model=MODEL, templates=RESISC45_TEMPLATES, class_names=CLASSES)
        for path in extract_text(job, tmp_path / "out"):
            m = tensorcore.read_embeddings(path)
            assert m.row_labels == CLASSES
            norms = np.linalg.norm(m.data, axis=1)
            assert np.max(np.abs(norms - 1.0)) <= 1e-5
            # the primary's normalized invariant accepts these rows as-is
            tensorcore.EmbeddingMatrix(m.data, row_labels=m.row_labels, normalized=True)


class TestExtractCrops:
    def test_rows_follow_manifest_order(self, tmp_path):
        images = make_images(tmp_path)
        manifest = make_manifest(tmp_path, images)
        crops = read_manifest(manifest)
        job = ExtractionJob(model=MODEL, templates=["{}"], crops=crops)
        out = tmp_path / "crops.zemb"
        extract_crops(job, out)
        m = tensorcore.read_embeddings(out)
        assert m.n_rows == len(crops)
        assert m.row_labels == [f"crop-{i:05d}" for i in range(len(crops))]
        enc = load_encoder(MODEL)
        with Image.open(crops[3].image) as img:
            x, y, w, h = crops[3].box
            expect = enc.encode_image(img.crop((x, y, x + w, y + h)))
        assert np.allclose(m.data[3], expect, atol=1e-6)

    def test_same_crop_twice_identical_rows(self, tmp_path):
        images = make_images(tmp_path, n=1)
        spec = CropSpec(image=str(images[0]), box=(0, 0, 16, 16), class_name="ship")
        job = ExtractionJob(model=MODEL, templates=["{}"], crops=[spec, spec])
        out = tmp_path / "crops.zemb"
        extract_crops(job, out)
        m = tensorcore.read_embeddings(out)
        assert np.array_equal(m.data[0], m.data[1])

    def test_bad_box_raises_with_index(self, tmp_path):
        images = make_images(tmp_path, n=1)
        good = CropSpec(image=str(images[0]), box=(0, 0, 16, 16), class_name="ship")
        bad = CropSpec(image=str(images[0]), box=(40, 40, 32, 32), class_name="ship")
        job = ExtractionJob(model=MODEL, templates=["{}"], crops=[good, bad])
        with pytest.raises(BadCrop) as e:
            extract_crops(job, tmp_path / "crops.zemb")
        assert e.value.index == 1

    def test_missing_image_raises(self, tmp_path):
        spec = CropSpec(image=str(tmp_path / "nope.png"), box=(0, 0, 4, 4), class_name="x")
        job = ExtractionJob(model=MODEL, templates=["{}"], crops=[spec])
        with pytest.raises(BadCrop):
            extract_crops(job, tmp_path / "crops.zemb")

    def test_cache_bank_builds_from_extracted_crops(self, tmp_path):
        images = make_images(tmp_path)
        manifest = make_manifest(tmp_path, images, per_class=3)
        crops = read_manifest(manifest)
        job = ExtractionJob(model=MODEL, templates=["{}"], crops=crops)
        out = tmp_path / "crops.zemb"
        extract_crops(job, out)

        m = tensorcore.read_embeddings(out)
        instances = {}
        for row, spec in zip(m.data, crops):
            instances.setdefault(spec.class_name, []).append(row)
        class_map = {name: i for i, name in enumerate([*CLASSES, "unseen-thing"])}
        bank = cachebank.build_seen_bank(instances, K=2, class_index_map=class_map)
        bank = cachebank.augment_unseen(
            bank, {"unseen-thing": [(m.data[0], 0.9)]}, K=2
        )
        # bank invariants were enforced at construction; exercise prediction
        logits = cachebank.cache_logits(bank, m.data[1])
        assert logits.shape == (5,)
        assert abs(float(logits.sum()) - 1.0) <= 1e-9


class TestCli:
    def test_end_to_end(self, tmp_path):
        classes = tmp_path / "classes.txt"
        classes.write_text("\n".join(CLASSES) + "\n")
        out_dir = tmp_path / "text"
        rc = zembx_main([
            "extract-text", "--model", MODEL,
            "--classes", str(classes), "--templates", "resisc45",
            "--out", str(out_dir),
        ])
        assert rc == 0
        assert (out_dir / "averaged.zemb").exists()

        images = make_images(tmp_path)
        manifest = make_manifest(tmp_path, images)
        crops_out = tmp_path / "crops.zemb"
        rc = zembx_main([
            "extract-crops", "--model", MODEL,
            "--manifest", str(manifest), "--out", str(crops_out),
        ])
        assert rc == 0
        assert tensorcore.read_embeddings(crops_out).n_rows == 8

    def test_error_exit_code(self, tmp_path, capsys):
        rc = zembx_main([
            "extract-crops", "--model", MODEL,
            "--manifest", str(tmp_path / "missing.jsonl"),
            "--out", str(tmp_path / "o.zemb"),
        ])
        assert rc == 1
        assert "error:" in capsys.readouterr().err
