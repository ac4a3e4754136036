"""Geometric ensemble of in-vocabulary and out-of-vocabulary class probabilities.

Per class c the fused probability is proportional to
p_in^(1-beta_c) * p_out^(beta_c), with beta_c chosen by whether the class
was seen in training. The exponents are configuration, not fitted values.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensorcore
from .errors import LengthMismatch, NotAProbabilityVector, ValidationError

PROB_FLOOR = 1e-12
SUM_TOL = 1e-6


@dataclass(frozen=True)
class EnsembleConfig:
    beta_seen: float
    beta_unseen: float
    seen_mask: np.ndarray

    def __post_init__(self):
        if not (0.0 <= self.beta_seen <= 1.0 and 0.0 <= self.beta_unseen <= 1.0):
            raise ValidationError("ensemble betas must lie in [0, 1]")
        m = np.asarray(self.seen_mask, dtype=np.bool_)
        if m.ndim != 1:
            raise ValidationError("seen_mask must be a 1-D boolean vector")
        m = np.ascontiguousarray(m)
        m.setflags(write=False)
        object.__setattr__(self, "seen_mask", m)


def _check_probability(name: str, p: np.ndarray) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1:
        raise NotAProbabilityVector(f"{name} must be 1-D")
    if np.any(p < 0):
        raise NotAProbabilityVector(f"{name} has a negative entry")
    s = float(p.sum())
    if abs(s - 1.0) > SUM_TOL:
        raise NotAProbabilityVector(f"{name} sums to {s}, expected 1")
    return p


def fuse(p_in: np.ndarray, p_out: np.ndarray, cfg: EnsembleConfig) -> np.ndarray:
    """Classwise geometric blend of two probability vectors, renormalized."""
    p_in = _check_probability("p_in", p_in)
    p_out = _check_probability("p_out", p_out)
    if p_in.shape != p_out.shape or p_in.shape != cfg.seen_mask.shape:
        raise LengthMismatch(
            f"p_in {p_in.shape}, p_out {p_out.shape}, seen_mask {cfg.seen_mask.shape}"
        )
    beta = np.where(cfg.seen_mask, cfg.beta_seen, cfg.beta_unseen)
    # floor before exponentiation so 0^0 cannot appear
    a = np.maximum(p_in, PROB_FLOOR)
    b = np.maximum(p_out, PROB_FLOOR)
    fused = a ** (1.0 - beta) * b**beta
    return fused / fused.sum()


def final_prediction(
    in_logits: np.ndarray,
    pip_logits: np.ndarray,
    cfg: EnsembleConfig,
    temperature: float,
) -> tuple[int, float]:
    """Softmax both logit vectors at the given temperature, fuse, take the argmax.

    Returns (class index, fused probability of that class). Ties resolve to
    the lowest class index.
    """
    if temperature <= 0:
        raise ValidationError(f"temperature must be positive, got {temperature}")
    p_in = tensorcore.softmax(np.asarray(in_logits, dtype=np.float64) / temperature)
    p_out = tensorcore.softmax(np.asarray(pip_logits, dtype=np.float64) / temperature)
    fused = fuse(p_in, p_out, cfg)
    best = int(np.argmax(fused))
    return best, float(fused[best])
