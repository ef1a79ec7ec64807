"""Classification, block-budget and determinism losses over routing fractions."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import RouteDecision
from .tensor import Tensor, clip, log, log_softmax, mean, mul, scale, square, sum_

V_CLAMP = 1e-12


@dataclass
class UsageFractions:
    v: Tensor  # (routable,)
    source: str = "batch"

    @property
    def values(self) -> np.ndarray:
        return self.v.data


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 0.5
    lambda2: float = 0.1
    k: int = 3

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("loss weights must be non-negative")
        if self.k < 0:
            raise ValueError("k must be non-negative")


def cross_entropy(logits: Tensor, labels) -> Tensor:
    labels = np.asarray(labels, dtype=np.intp)
    batch, classes = logits.shape
    if labels.shape != (batch,):
        raise ValueError(f"expected {batch} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise ValueError(f"label out of range [0, {classes})")
    onehot = np.zeros((batch, classes))
    onehot[np.arange(batch), labels] = 1.0
    picked = sum_(mul(log_softmax(logits), Tensor(onehot)), axis=1)
    return scale(mean(picked), -1.0)


def usage_fractions(decisions: RouteDecision, relaxed: bool = False) -> UsageFractions:
    """Fraction of the batch routed through each tuned block.

    ``relaxed`` averages the soft fine-tune weight so the result carries
    gradients to the policy; otherwise the hard bits are counted.
    """
    if decisions.batch_size == 0:
        raise ValueError("usage fractions of an empty batch")
    if relaxed:
        if decisions.sample is None:
            raise ValueError("relaxed fractions need sampled (soft) decisions")
        return UsageFractions(mean(decisions.sample.soft[:, :, 1], axis=0), "batch")
    return UsageFractions(Tensor(decisions.hard.mean(axis=0)), "batch")


def hard_fractions(bits: np.ndarray) -> UsageFractions:
    bits = np.asarray(bits)
    if bits.shape[0] == 0:
        raise ValueError("usage fractions of an empty decision log")
    return UsageFractions(Tensor(bits.mean(axis=0)), "dataset")


def _as_v(v) -> Tensor:
    if isinstance(v, UsageFractions):
        return v.v
    return v if isinstance(v, Tensor) else Tensor(np.asarray(v, dtype=np.float64))


def global_k_loss(v, k: float) -> Tensor:
    return square(sum_(_as_v(v)) - float(k))


def entropy_loss(v) -> Tensor:
    """Sum of -v log v with 0 log 0 = 0; the log argument is clamped away from zero."""
    v = _as_v(v)
    return scale(sum_(mul(v, log(clip(v, V_CLAMP, 1.0)))), -1.0)


def total_loss(lc: Tensor, lk: Tensor, le: Tensor, weights: LossWeights) -> Tensor:
    return lc + scale(lk, weights.lambda1) + scale(le, weights.lambda2)
