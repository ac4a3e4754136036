"""Encoder backends.

Two families are understood by :func:`load_encoder`:

``hash-v1-<dim>``
    A dependency-free deterministic encoder. Text is embedded by hashed
    bag-of-tokens (SHA-256 derived slots, unit-normalized); images are
    resized to 16x16 RGB, flattened, and projected through a fixed
    sign-matrix derived from a splitmix64 stream keyed by the output
    dimension. Same input bytes always produce the same vector, so runs
    are reproducible and tests need no model weights.

``hf-clip:<model-or-path>``
    A CLIP checkpoint loaded through transformers (optional extra).
    Inference runs under no_grad in eval mode, so repeated runs produce
    identical embeddings.
"""

from __future__ import annotations

import hashlib

import numpy as np
from PIL import Image

from .errors import ModelLoadError

_MASK = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15

_PATCH = 16  # hash-v1 images are resampled to _PATCH x _PATCH RGB


def _mix64(z: int) -> int:
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9 & _MASK
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB & _MASK
    return z ^ (z >> 31)


def _sign_matrix(rows: int, cols: int, key: int) -> np.ndarray:
    idx = np.arange(1, rows * cols + 1, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = np.uint64(_mix64(key)) + idx * np.uint64(_GOLDEN)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        z = z ^ (z >> np.uint64(31))
    signs = np.where((z & np.uint64(1)).astype(bool), 1.0, -1.0)
    return signs.reshape(rows, cols)


class HashEncoder:
    """Deterministic stand-in encoder with a fixed output dimension."""

    def __init__(self, dim: int):
        if dim < 8:
            raise ModelLoadError(f"hash-v1-{dim}", "dimension must be at least 8")
        self.dim = dim
        self._projection = _sign_matrix(_PATCH * _PATCH * 3, dim, key=dim)

    def encode_text(self, text: str) -> np.ndarray:
        out = np.zeros(self.dim)
        tokens = ["<s>"] + text.lower().split()
        for token in tokens:
            token = token.strip(".,;:!?\"'()")
            if not token:
                continue
            digest = hashlib.sha256(token.encode("utf-8")).digest()
            for slot in range(4):
                chunk = digest[slot * 8 : slot * 8 + 8]
                value = int.from_bytes(chunk, "little")
                sign = 1.0 if value & 1 else -1.0
                out[(value >> 1) % self.dim] += sign
        norm = float(np.linalg.norm(out))
        if norm == 0.0:
            out[0] = 1.0
            norm = 1.0
        return out / norm

    def encode_image(self, image: Image.Image) -> np.ndarray:
        small = image.convert("RGB").resize((_PATCH, _PATCH), Image.BILINEAR)
        pixels = np.asarray(small, dtype=np.float64).reshape(-1) / 255.0
        out = pixels @ self._projection
        norm = float(np.linalg.norm(out))
        if norm == 0.0:
            out = self._projection[0].copy()
            norm = float(np.linalg.norm(out))
        return out / norm


class ClipEncoder:
    """CLIP checkpoint via transformers; requires the 'clip' extra."""

    def __init__(self, model_id: str):
        try:
            import torch
            from transformers import CLIPModel, CLIPProcessor
        except ImportError as e:
            raise ModelLoadError(model_id, f"transformers/torch unavailable: {e}") from e
        try:
            self._model = CLIPModel.from_pretrained(model_id)
            self._processor = CLIPProcessor.from_pretrained(model_id)
        except Exception as e:
            raise ModelLoadError(model_id, str(e)) from e
        self._torch = torch
        self._model.eval()
        self.dim = int(self._model.config.projection_dim)

    def encode_text(self, text: str) -> np.ndarray:
        inputs = self._processor(text=[text], return_tensors="pt", padding=True)
        with self._torch.no_grad():
            feats = self._model.get_text_features(**inputs)[0]
        out = feats.numpy().astype(np.float64)
        return out / np.linalg.norm(out)

    def encode_image(self, image: Image.Image) -> np.ndarray:
        inputs = self._processor(images=[image.convert("RGB")], return_tensors="pt")
        with self._torch.no_grad():
            feats = self._model.get_image_features(**inputs)[0]
        out = feats.numpy().astype(np.float64)
        return out / np.linalg.norm(out)


def load_encoder(identifier: str):
    if identifier.startswith("hash-v1-"):
        try:
            dim = int(identifier.removeprefix("hash-v1-"))
        except ValueError as e:
            raise ModelLoadError(identifier, f"bad dimension suffix: {e}") from e
        return HashEncoder(dim)
    if identifier.startswith("hf-clip:"):
        return ClipEncoder(identifier.removeprefix("hf-clip:"))
    raise ModelLoadError(identifier, "expected 'hash-v1-<dim>' or 'hf-clip:<model>'")
