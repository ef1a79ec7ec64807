"""Gumbel-Max sampling, the Gumbel-Softmax relaxation, and its straight-through estimator."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, as_tensor, custom_op, scale, softmax

U_EPS = 1e-12


@dataclass(frozen=True)
class GumbelNoise:
    values: np.ndarray
    stream: str = ""


@dataclass
class RelaxedSample:
    hard: Tensor
    soft: Tensor
    tau: float

    @property
    def index(self) -> np.ndarray:
        return self.hard.data.argmax(axis=-1)


def gumbel_from_uniform(u) -> np.ndarray:
    u = np.clip(np.asarray(u, dtype=np.float64), U_EPS, 1.0 - U_EPS)
    return -np.log(-np.log(u))


def sample_gumbel(shape, rng: np.random.Generator, stream: str = "") -> GumbelNoise:
    shape = (int(shape),) if np.isscalar(shape) else tuple(int(s) for s in shape)
    if len(shape) == 0 or any(s <= 0 for s in shape):
        raise ValueError(f"invalid noise shape {shape}")
    return GumbelNoise(gumbel_from_uniform(rng.random(shape)), stream)


def _noise_values(noise, shape) -> np.ndarray:
    values = noise.values if isinstance(noise, GumbelNoise) else np.asarray(noise, dtype=np.float64)
    if values.shape != tuple(shape):
        raise ValueError(f"noise shape {values.shape} does not match logits shape {tuple(shape)}")
    return values


def gumbel_max(log_alphas, noise) -> np.ndarray | int:
    """Index of the largest perturbed logit along the last axis (lowest index on ties)."""
    logits = log_alphas.data if isinstance(log_alphas, Tensor) else np.asarray(log_alphas, dtype=np.float64)
    if not np.all(np.isfinite(logits)):
        raise ValueError("log-alphas must be finite")
    idx = np.argmax(logits + _noise_values(noise, logits.shape), axis=-1)
    return int(idx) if idx.ndim == 0 else idx


def gumbel_softmax(log_alphas, noise, tau: float) -> Tensor:
    if not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    logits = as_tensor(log_alphas)
    g = Tensor(_noise_values(noise, logits.shape))
    return softmax(scale(logits + g, 1.0 / tau))


def straight_through(log_alphas, noise, tau: float) -> RelaxedSample:
    """Hard one-hot sample in the forward pass, relaxed-softmax gradient in the backward pass."""
    logits = as_tensor(log_alphas)
    soft = gumbel_softmax(logits, noise, tau)
    idx = np.asarray(gumbel_max(logits, noise))
    onehot = np.zeros(logits.shape)
    np.put_along_axis(onehot, idx[..., None], 1.0, axis=-1)
    hard = custom_op("straight_through", (soft,), onehot, lambda g: (g,))
    return RelaxedSample(hard=hard, soft=soft, tau=float(tau))
