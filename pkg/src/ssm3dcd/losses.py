"""Cross-entropy + Dice with deep supervision over the three decoder heads."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

PROB_CLAMP = 1e-7
DICE_SMOOTH = 1e-6


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 0.5
    lambda2: float = 0.5

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError(f"loss weights must be nonnegative, got ({self.lambda1}, {self.lambda2})")
        if self.lambda1 == 0 and self.lambda2 == 0:
            raise ValueError("loss weights cannot both be zero")


def _prepare(probs, target):
    probs = T.as_tensor(probs)
    target = np.asarray(target, dtype=probs.dtype)
    if probs.shape != target.shape:
        raise ValueError(f"loss: prediction shape {probs.shape} != target shape {target.shape}")
    return probs, target


def ce_loss(probs, target) -> Tensor:
    """Mean binary cross-entropy of the change-class probability."""
    probs, y = _prepare(probs, target)
    p = T.clip(probs, PROB_CLAMP, 1.0 - PROB_CLAMP)
    per_pixel = T.log(p) * y + T.log(1.0 - p) * (1.0 - y)
    return -T.mean(per_pixel)


def dice_loss(probs, target) -> Tensor:
    """1 - (2 sum(y p) + s) / (sum(y) + sum(p) + s), averaged over samples when batched."""
    probs, y = _prepare(probs, target)
    p = T.clip(probs, PROB_CLAMP, 1.0 - PROB_CLAMP)
    axes = tuple(range(1, p.ndim)) if p.ndim == 3 else None
    inter = T.tsum(p * y, axis=axes)
    denom = T.tsum(p, axis=axes) + y.sum(axis=axes)
    score = (inter * 2.0 + DICE_SMOOTH) / (denom + DICE_SMOOTH)
    return T.mean(1.0 - score)


def total_loss(heads, weights: LossWeights = LossWeights()) -> Tensor:
    """Sum over heads of lambda1 * CE + lambda2 * Dice; ``heads`` is [(probs, target)] * 3."""
    heads = list(heads)
    if len(heads) != 3:
        raise ValueError(f"total_loss expects 3 supervised heads, got {len(heads)}")
    total = None
    for probs, target in heads:
        term = ce_loss(probs, target) * weights.lambda1 + dice_loss(probs, target) * weights.lambda2
        total = term if total is None else total + term
    return total
