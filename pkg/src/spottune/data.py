"""Synthetic Gaussian-cluster source/target tasks and the SPTD dataset file."""
from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from .binio import FormatError, Reader, atomic_write, f64_bytes, u32

SPTD_MAGIC = b"SPTD"
SPTD_VERSION = 1

_SPLITS = {"train": 1, "eval": 2}


@dataclass(frozen=True)
class TaskSpec:
    input_dim: int = 16
    num_classes: int = 4
    num_train: int = 2048
    num_eval: int = 512
    shift: float = 0.0
    seed: int = 0
    separation: float = 1.0  # scale of the class means
    spread: float = 3.0  # within-class noise scale

    def __post_init__(self):
        if self.input_dim <= 0 or self.num_classes <= 0:
            raise ValueError("input_dim and num_classes must be positive")
        if self.num_train < 0 or self.num_eval < 0:
            raise ValueError("sample counts must be non-negative")
        if self.num_classes > self.num_train:
            raise ValueError(f"num_classes ({self.num_classes}) exceeds num_train ({self.num_train})")
        if not 0.0 <= self.shift <= 1.0:
            raise ValueError(f"shift must lie in [0, 1], got {self.shift}")

    def digest(self) -> str:
        text = ",".join(f"{k}={v!r}" for k, v in sorted(asdict(self).items()))
        return hashlib.sha256(text.encode()).hexdigest()


@dataclass(frozen=True)
class ClassParams:
    means: np.ndarray  # (classes, dim)
    factors: np.ndarray  # (classes, dim, dim); covariance = f f^T


@dataclass
class LabeledSet:
    inputs: np.ndarray
    labels: np.ndarray
    num_classes: int
    provenance: str = ""

    def __post_init__(self):
        self.inputs = np.ascontiguousarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.inputs.ndim != 2 or self.labels.shape != (self.inputs.shape[0],):
            raise ValueError("inputs must be (n, dim) with one label per row")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError("label out of range")

    def __len__(self) -> int:
        return self.inputs.shape[0]

    @property
    def input_dim(self) -> int:
        return self.inputs.shape[1]

    def same_data(self, other: "LabeledSet") -> bool:
        return (self.num_classes == other.num_classes
                and np.array_equal(self.inputs, other.inputs)
                and np.array_equal(self.labels, other.labels))


def _draw_params(rng: np.random.Generator, spec: TaskSpec) -> ClassParams:
    d, c = spec.input_dim, spec.num_classes
    means = rng.standard_normal((c, d)) * spec.separation
    # purely random factors: interpolating two draws rescales means and spreads
    # alike, so intrinsic difficulty does not dip at intermediate shifts
    factors = rng.standard_normal((c, d, d)) / np.sqrt(d)
    return ClassParams(means, factors * spec.spread)


def source_params(spec: TaskSpec) -> ClassParams:
    return _draw_params(np.random.default_rng([spec.seed, 0]), spec)


def target_params(source_spec: TaskSpec, shift: float, seed: int) -> ClassParams:
    if not 0.0 <= shift <= 1.0:
        raise ValueError(f"shift must lie in [0, 1], got {shift}")
    src = source_params(source_spec)
    fresh = _draw_params(np.random.default_rng([seed, 0, 1]), source_spec)
    if shift == 0.0:
        return src
    return ClassParams((1.0 - shift) * src.means + shift * fresh.means,
                       (1.0 - shift) * src.factors + shift * fresh.factors)


def sample_set(params: ClassParams, n: int, rng: np.random.Generator, provenance: str = "") -> LabeledSet:
    c, d = params.means.shape
    labels = np.arange(n) % c
    rng.shuffle(labels)
    z = rng.standard_normal((n, d))
    x = params.means[labels] + np.einsum("nij,nj->ni", params.factors[labels], z)
    return LabeledSet(x, labels, c, provenance)


def _split_size(spec: TaskSpec, split: str) -> int:
    if split not in _SPLITS:
        raise ValueError(f"unknown split {split!r}")
    return spec.num_train if split == "train" else spec.num_eval


def generate_source(spec: TaskSpec, split: str = "train") -> LabeledSet:
    rng = np.random.default_rng([spec.seed, _SPLITS[split]])
    return sample_set(source_params(spec), _split_size(spec, split), rng, spec.digest())


def generate_target(source_spec: TaskSpec, shift: float, seed: int, split: str = "train",
                    num_train: int | None = None) -> LabeledSet:
    """Target task whose class distributions sit ``shift`` of the way to a fresh task."""
    spec = replace(source_spec, shift=shift, seed=seed,
                   num_train=source_spec.num_train if num_train is None else num_train)
    params = target_params(source_spec, shift, seed)
    rng = np.random.default_rng([seed, _SPLITS[split], 7])
    tag = hashlib.sha256((source_spec.digest() + spec.digest()).encode()).hexdigest()
    return sample_set(params, _split_size(spec, split), rng, tag)


def encode_dataset(ds: LabeledSet) -> bytes:
    n, d = ds.inputs.shape
    return b"".join([SPTD_MAGIC, u32(SPTD_VERSION), u32(n), u32(d), u32(ds.num_classes),
                     f64_bytes(ds.inputs), ds.labels.astype("<u4").tobytes()])


def decode_dataset(buf: bytes) -> LabeledSet:
    r = Reader(buf)
    r.magic(SPTD_MAGIC)
    at = r.pos
    version = r.u32("version")
    if version != SPTD_VERSION:
        raise FormatError(f"unsupported SPTD version {version}", at)
    n = r.u32("row count")
    d = r.u32("input dim")
    at = r.pos
    c = r.u32("class count")
    if c == 0:
        raise FormatError("class count is zero", at)
    inputs = r.f64_array((n, d), "inputs")
    at = r.pos
    labels = r.u32_array(n, "labels")
    r.end()
    if labels.size and labels.max() >= c:
        raise FormatError(f"label {int(labels.max())} >= class count {c}", at)
    return LabeledSet(inputs, labels, c, hashlib.sha256(buf).hexdigest())


def save_dataset(path, ds: LabeledSet) -> None:
    atomic_write(path, encode_dataset(ds))


def load_dataset(path) -> LabeledSet:
    return decode_dataset(Path(path).read_bytes())
