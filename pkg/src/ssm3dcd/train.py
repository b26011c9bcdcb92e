"""Adam optimisation, the supervised training step and split evaluation."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .losses import LossWeights, total_loss
from .metrics import MetricsReport, confusion_counts
from .network import ChangeDetector, change_probability, mask_from_logits, model_forward
from .tensor import Tensor


class NumericError(FloatingPointError):
    """Training produced a non-finite loss or gradient."""


class Adam:
    """Adam with bias correction; state is kept per parameter in call order."""

    def __init__(self, params, lr: float = 1e-4, betas=(0.9, 0.999), eps: float = 1e-8):
        if lr <= 0:
            raise ValueError(f"learning rate must be > 0, got {lr}")
        b1, b2 = betas
        if not (0 <= b1 < 1 and 0 <= b2 < 1):
            raise ValueError(f"Adam betas must lie in [0, 1), got {betas}")
        self.params = list(params)
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()


def head_probabilities(logits, H: int, W: int) -> list:
    return [change_probability(lg, H, W) for lg in logits]


def batch_loss(model: ChangeDetector, I1, I2, y, weights: LossWeights) -> Tensor:
    H, W = y.shape[-2:]
    probs = head_probabilities(model_forward(I1, I2, model), H, W)
    return total_loss([(p, y) for p in probs], weights)


def train_step(model: ChangeDetector, opt: Adam, I1, I2, y, weights: LossWeights) -> float:
    opt.zero_grad()
    loss = batch_loss(model, I1, I2, y, weights)
    value = float(loss.data)
    if not math.isfinite(value):
        raise NumericError(f"non-finite training loss {value} at step {opt.t + 1}")
    loss.backward()
    for p in opt.params:
        if not np.all(np.isfinite(p.grad)):
            raise NumericError(f"non-finite gradient in parameter {p.name} at step {opt.t + 1}")
    opt.step()
    return value


def batch_order(rng, n: int, batch_size: int) -> list:
    """Shuffled index batches for one epoch; the last batch may be short."""
    perm = rng.permutation(n)
    return [perm[i:i + batch_size] for i in range(0, n, batch_size)]


@dataclass
class EvalResult:
    report: MetricsReport
    masks: list
    loss: float


def evaluate(model: ChangeDetector, split, threshold: float = 0.5, batch_size: int = 8,
             weights: LossWeights = LossWeights()) -> EvalResult:
    """Aggregate confusion counts over a split; also returns masks and the mean loss."""
    dtype = model.dtype
    report = MetricsReport(0, 0, 0, 0)
    masks, losses = [], []
    for start in range(0, len(split), batch_size):
        idx = list(range(start, min(start + batch_size, len(split))))
        I1, I2, y = split.arrays(idx, dtype)
        H, W = y.shape[-2:]
        logits = model_forward(I1, I2, model)
        probs = head_probabilities(logits, H, W)
        losses.append(float(total_loss([(p, y) for p in probs], weights).data) * len(idx))
        pred = mask_from_logits(logits[-1].data, H, W, threshold).mask
        for k in range(len(idx)):
            masks.append(pred[k])
            report = report + confusion_counts(pred[k], y[k])
    return EvalResult(report, masks, sum(losses) / max(1, len(split)))
