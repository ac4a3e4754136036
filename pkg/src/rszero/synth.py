"""Deterministic synthetic fixtures with planted structure.

Class embeddings are separated only on a planted subset of channels, so
channel selection has a known right answer; scenes broadcast each class
embedding inside non-overlapping rectangular instance masks, so mask
pooling recovers the class vector up to noise. Everything is reproducible
from the config seed.

Randomness comes from a counter-mode splitmix64 generator rather than the
platform RNG. For a 64-bit seed, stream id s and counter i (both starting
at 0), the i-th word is

    key    = mix(seed XOR mix(s))
    word_i = mix((key + (i + 1) * 0x9E3779B97F4A7C15) mod 2^64)

where mix is the splitmix64 finalizer

    z ^= z >> 30; z *= 0xBF58476D1CE4E5B9
    z ^= z >> 27; z *= 0x94D049BB133111EB
    z ^= z >> 31

(all arithmetic mod 2^64). Uniforms take the top 53 bits of a word; normal
deviates use the Box-Muller transform on pairs of uniforms; bounded
integers use rejection sampling. The integer stream is exactly reproducible
everywhere; the float transforms additionally assume IEEE-754 doubles with
the platform's exp/log/sqrt/cos/sin, which is stable within an install.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensorcore
from .errors import BadConfig, DoesNotFit
from .evaluation import InstanceAnnotation
from .pipeline import Proposal
from .protocol import SeenUnseenSplit
from .tensorcore import BinaryMask, EmbeddingMatrix, FeatureMap

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)

# stream tags; scene-dependent streams compose the tag with the scene index
STREAM_PLANTED = 1
STREAM_BASE = 2
STREAM_SIGNS = 3
STREAM_TEXT_NOISE = 4
STREAM_BACKBONE = 5
STREAM_PLACEMENT = 6
STREAM_SCENE_NOISE = 7
STREAM_PROPOSAL = 8
STREAM_DOMAIN = 9

# visual-domain fixture shape: quirk magnitude relative to the unit text
# embedding, and how far each unseen class drifts toward its seen partner
DOMAIN_QUIRK_GAIN = 3.0
CONFUSION_PULL = 1.0


def _mix(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


def compose_stream(tag: int, sub: int) -> int:
    """Derive a distinct stream id from a tag and a sub-index (e.g. scene number)."""
    return ((tag & 0xFFFFFFFF) << 32) | (sub & 0xFFFFFFFF)


class CounterRng:
    """Counter-mode splitmix64; every draw is a pure function of (seed, stream, counter)."""

    def __init__(self, seed: int, stream: int = 0):
        s = np.uint64(seed & 0xFFFFFFFFFFFFFFFF)
        t = np.uint64(stream & 0xFFFFFFFFFFFFFFFF)
        with np.errstate(over="ignore"):
            self._key = _mix(np.array([s ^ _mix(np.array([t]))[0]], dtype=np.uint64))[0]
        self._counter = 0

    def words(self, n: int) -> np.ndarray:
        idx = np.arange(self._counter + 1, self._counter + n + 1, dtype=np.uint64)
        self._counter += n
        with np.errstate(over="ignore"):
            return _mix(self._key + idx * _GOLDEN)

    def uniforms(self, n: int) -> np.ndarray:
        """i.i.d. float64 in [0, 1)."""
        return (self.words(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53

    def normals(self, n: int) -> np.ndarray:
        """i.i.d. standard normal via Box-Muller; consumes 2*ceil(n/2) words."""
        m = (n + 1) // 2
        w = self.words(2 * m)
        u1 = ((w[:m] >> np.uint64(11)).astype(np.float64) + 1.0) * 2.0**-53  # (0, 1]
        u2 = (w[m:] >> np.uint64(11)).astype(np.float64) * 2.0**-53  # [0, 1)
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * math.pi * u2
        out = np.empty(2 * m)
        out[0::2] = r * np.cos(theta)
        out[1::2] = r * np.sin(theta)
        return out[:n]

    def integer(self, bound: int) -> int:
        """Unbiased integer in [0, bound) via rejection sampling."""
        if bound < 1:
            raise ValueError(f"bound must be >= 1, got {bound}")
        limit = (2**64 // bound) * bound
        while True:
            w = int(self.words(1)[0])
            if w < limit:
                return w % bound

    def shuffled(self, items: Sequence) -> list:
        """Fisher-Yates shuffle (copy returned, input untouched)."""
        out = list(items)
        for i in range(len(out) - 1, 0, -1):
            j = self.integer(i + 1)
            out[i], out[j] = out[j], out[i]
        return out


@dataclass(frozen=True)
class SynthConfig:
    seed: int = 0
    n_seen: int = 6
    n_unseen: int = 2
    D_text: int = 64
    D_backbone: int = 64
    n_discriminative_channels: int = 8
    noise_sigma: float = 0.02
    instances_per_class: int = 2
    image_size: tuple[int, int] = (64, 64)

    def __post_init__(self):
        for name in ("n_seen", "n_unseen", "D_text", "D_backbone",
                     "n_discriminative_channels", "instances_per_class"):
            if getattr(self, name) < 1:
                raise BadConfig("must be >= 1", field=name)
        if self.n_discriminative_channels > self.D_text:
            raise BadConfig(
                f"cannot plant {self.n_discriminative_channels} of {self.D_text} channels",
                field="n_discriminative_channels",
            )
        if self.noise_sigma < 0:
            raise BadConfig("must be >= 0", field="noise_sigma")
        h, w = self.image_size
        if h < 4 or w < 4:
            raise BadConfig("image must be at least 4x4", field="image_size")
        object.__setattr__(self, "image_size", (int(h), int(w)))

    @property
    def n_classes(self) -> int:
        return self.n_seen + self.n_unseen

    def class_names(self) -> list[str]:
        seen = [f"seen-{i:02d}" for i in range(self.n_seen)]
        unseen = [f"unseen-{i:02d}" for i in range(self.n_unseen)]
        return seen + unseen

    def split(self) -> SeenUnseenSplit:
        names = self.class_names()
        return SeenUnseenSplit(
            dataset_name="synth",
            seen=names[: self.n_seen],
            unseen=names[self.n_seen :],
        )


def _planted_matrix(
    cfg: SynthConfig,
    n_rows: int,
    dim: int,
    n_planted: int,
    stream_tag: int,
) -> tuple[np.ndarray, list[int]]:
    """Rows that agree on every channel except a planted subset.

    Planted channels carry per-row signs of magnitude 1 (rows 0 and 1 forced
    to disagree so no planted channel can degenerate into a constant);
    remaining channels share a per-channel base value in [1.0, 1.5).
    """
    rng_planted = CounterRng(cfg.seed, compose_stream(stream_tag, STREAM_PLANTED))
    planted = sorted(rng_planted.shuffled(range(dim))[:n_planted])

    rng_base = CounterRng(cfg.seed, compose_stream(stream_tag, STREAM_BASE))
    base = 1.0 + 0.5 * rng_base.uniforms(dim)
    data = np.tile(base, (n_rows, 1))

    rng_signs = CounterRng(cfg.seed, compose_stream(stream_tag, STREAM_SIGNS))
    for d in planted:
        signs = np.where(rng_signs.uniforms(n_rows) < 0.5, -1.0, 1.0)
        if n_rows >= 2:
            signs[0] = 1.0
            signs[1] = -1.0
        data[:, d] = signs
    return data, planted


def generate_class_embeddings(cfg: SynthConfig) -> tuple[EmbeddingMatrix, list[int]]:
    """Class text embeddings plus the planted channel index set.

    With noise_sigma = 0 the top-n_discriminative_channels by the combined
    similarity/variance objective are exactly the planted set.
    """
    n = cfg.n_classes
    data, planted = _planted_matrix(
        cfg, n, cfg.D_text, cfg.n_discriminative_channels, stream_tag=0
    )
    if cfg.noise_sigma > 0:
        rng = CounterRng(cfg.seed, compose_stream(0, STREAM_TEXT_NOISE))
        data = data + cfg.noise_sigma * rng.normals(n * cfg.D_text).reshape(n, cfg.D_text)
    m = tensorcore.l2_normalize_rows(EmbeddingMatrix(data, row_labels=cfg.class_names()))
    return m, planted


def generate_visual_class_embeddings(cfg: SynthConfig) -> EmbeddingMatrix:
    """Per-class visual embeddings: text embeddings under a synthetic domain gap.

    Two effects are planted. Every class gains a class-specific quirk
    direction (mutually orthogonal across classes, supported off the planted
    channels, magnitude DOMAIN_QUIRK_GAIN), so instance features carry
    appearance information the text embeddings lack. Every unseen class is
    additionally pulled toward the text embedding of a seen partner class
    (round-robin, strength CONFUSION_PULL), so the text classifier confuses
    the pair while cached visual prototypes still separate them. This is
    what lets cache fusion measurably improve unseen-class accuracy.
    """
    text, planted = generate_class_embeddings(cfg)
    n, d = text.data.shape
    v = text.data.copy()

    complement = sorted(set(range(d)) - set(planted))
    if complement:
        rng = CounterRng(cfg.seed, compose_stream(STREAM_DOMAIN, 0))
        raw = rng.normals(n * len(complement)).reshape(n, len(complement))
        basis: list[np.ndarray] = []
        for i in range(n):
            q = raw[i].copy()
            if len(basis) < len(complement):
                for u in basis:
                    q -= (q @ u) * u
            norm = float(np.sqrt(np.sum(q * q)))
            if norm > 1e-12:
                q /= norm
                basis.append(q)
                v[i, complement] += DOMAIN_QUIRK_GAIN * q

    for j in range(cfg.n_unseen):
        partner = j % cfg.n_seen
        v[cfg.n_seen + j] += CONFUSION_PULL * text.data[partner]
    return tensorcore.l2_normalize_rows(EmbeddingMatrix(v, row_labels=cfg.class_names()))


def generate_backbone_class_features(cfg: SynthConfig) -> EmbeddingMatrix:
    """Per-seen-class backbone feature means (for channel partitioning demos)."""
    n_planted = min(cfg.n_discriminative_channels, cfg.D_backbone)
    data, _ = _planted_matrix(
        cfg, cfg.n_seen, cfg.D_backbone, n_planted, stream_tag=STREAM_BACKBONE
    )
    if cfg.noise_sigma > 0:
        rng = CounterRng(cfg.seed, compose_stream(STREAM_BACKBONE, STREAM_TEXT_NOISE))
        data = data + cfg.noise_sigma * rng.normals(data.size).reshape(data.shape)
    labels = cfg.class_names()[: cfg.n_seen]
    return tensorcore.l2_normalize_rows(EmbeddingMatrix(data, row_labels=labels))


def scene_image_id(scene_index: int) -> str:
    return f"scene-{scene_index:04d}"


def generate_scene(
    cfg: SynthConfig,
    scene_index: int = 0,
    mask_jitter: int = 0,
    embeddings: EmbeddingMatrix | None = None,
    text_embeddings: EmbeddingMatrix | None = None,
) -> tuple[FeatureMap, list[InstanceAnnotation], list[Proposal]]:
    """One synthetic image: feature map, ground truth, and jittered proposals.

    Instances are axis-aligned rectangles on a non-overlapping grid, one
    mask per instance, classes assigned round-robin. The feature map is the
    class embedding broadcast inside each mask (zeros elsewhere) plus
    Gaussian noise; by default that is the visual-domain embedding, so mask
    pooling a ground-truth region recovers the class's visual vector.
    Proposals reuse the ground-truth masks shifted by up to ``mask_jitter``
    pixels, with scores in [0.5, 1); their embedding vector is the class
    TEXT embedding plus noise, standing in for a trained class-embedding
    head that lives in text space.
    """
    if text_embeddings is None:
        text_embeddings, _ = generate_class_embeddings(cfg)
    if embeddings is None:
        embeddings = generate_visual_class_embeddings(cfg)
    n = cfg.n_classes
    h, w = cfg.image_size
    n_inst = n * cfg.instances_per_class
    g_cols = math.ceil(math.sqrt(n_inst))
    g_rows = math.ceil(n_inst / g_cols)
    cell_h = h // g_rows
    cell_w = w // g_cols
    if cell_h < 4 or cell_w < 4:
        raise DoesNotFit(
            f"{n_inst} instances do not fit a {h}x{w} image (cell {cell_h}x{cell_w})"
        )

    image_id = scene_image_id(scene_index)
    rng_place = CounterRng(cfg.seed, compose_stream(STREAM_PLACEMENT, scene_index))
    fm_data = np.zeros((cfg.D_text, h, w))
    annotations: list[InstanceAnnotation] = []
    rects: list[tuple[int, int, int, int]] = []
    for j in range(n_inst):
        cls = j % n
        cy, cx = divmod(j, g_cols)
        avail_h, avail_w = cell_h - 2, cell_w - 2
        rh = 2 + rng_place.integer(avail_h - 1)
        rw = 2 + rng_place.integer(avail_w - 1)
        oy = rng_place.integer(avail_h - rh + 1)
        ox = rng_place.integer(avail_w - rw + 1)
        y0 = cy * cell_h + 1 + oy
        x0 = cx * cell_w + 1 + ox
        rects.append((y0, x0, rh, rw))
        bits = np.zeros((h, w), dtype=np.bool_)
        bits[y0 : y0 + rh, x0 : x0 + rw] = True
        annotations.append(
            InstanceAnnotation(image_id=image_id, class_id=cls, mask=BinaryMask(bits))
        )
        fm_data[:, y0 : y0 + rh, x0 : x0 + rw] = embeddings.data[cls][:, None, None]

    if cfg.noise_sigma > 0:
        rng_noise = CounterRng(cfg.seed, compose_stream(STREAM_SCENE_NOISE, scene_index))
        fm_data = fm_data + cfg.noise_sigma * rng_noise.normals(fm_data.size).reshape(
            fm_data.shape
        )

    rng_prop = CounterRng(cfg.seed, compose_stream(STREAM_PROPOSAL, scene_index))
    proposals: list[Proposal] = []
    for ann, (y0, x0, rh, rw) in zip(annotations, rects):
        if mask_jitter > 0:
            dy = rng_prop.integer(2 * mask_jitter + 1) - mask_jitter
            dx = rng_prop.integer(2 * mask_jitter + 1) - mask_jitter
            ny0 = min(max(y0 + dy, 0), h - rh)
            nx0 = min(max(x0 + dx, 0), w - rw)
            bits = np.zeros((h, w), dtype=np.bool_)
            bits[ny0 : ny0 + rh, nx0 : nx0 + rw] = True
            mask = BinaryMask(bits)
        else:
            mask = ann.mask
        score = 0.5 + 0.5 * float(rng_prop.uniforms(1)[0])
        emb = text_embeddings.data[ann.class_id].copy()
        if cfg.noise_sigma > 0:
            emb = emb + cfg.noise_sigma * rng_prop.normals(cfg.D_text)
        proposals.append(
            Proposal(
                image_id=image_id,
                score=score,
                mask=mask,
                embedding=emb,
                true_class_id=ann.class_id,
            )
        )
    return FeatureMap(fm_data), annotations, proposals
