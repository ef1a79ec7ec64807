"""Residual MLP backbone with frozen/tuned block pairs and the routing policy network."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from .gumbel import RelaxedSample, sample_gumbel, straight_through
from .tensor import Tensor, ShapeError, as_tensor, matmul, relu, reshape

DEFAULT_TAU = 5.0


def _param(data, name: str) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), name=name)


@dataclass
class Linear:
    w: Tensor
    b: Tensor  # row vector, shape (1, out)

    @classmethod
    def init(cls, rng: np.random.Generator, n_in: int, n_out: int, std: float | None = None, name: str = "") -> "Linear":
        std = 1.0 / np.sqrt(n_in) if std is None else std
        w = rng.standard_normal((n_in, n_out)) * std
        return cls(_param(w, f"{name}.w"), _param(np.zeros((1, n_out)), f"{name}.b"))

    def __call__(self, x: Tensor) -> Tensor:
        if x.data.ndim != 2 or x.shape[1] != self.w.shape[0]:
            raise ShapeError("linear", x.shape, self.w.shape)
        ones = Tensor(np.ones((x.shape[0], 1)))
        return matmul(x, self.w) + matmul(ones, self.b)

    def parameters(self) -> list[Tensor]:
        return [self.w, self.b]

    def copy(self) -> "Linear":
        return Linear(_param(self.w.data.copy(), self.w.name), _param(self.b.data.copy(), self.b.name))


@dataclass
class ResidualBlock:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    @classmethod
    def init(cls, rng: np.random.Generator, width: int, hidden: int, out_scale: float = 1.0) -> "ResidualBlock":
        w1 = rng.standard_normal((width, hidden)) * np.sqrt(2.0 / width)
        w2 = rng.standard_normal((hidden, width)) * (out_scale / np.sqrt(hidden))
        return cls(_param(w1, "w1"), _param(np.zeros((1, hidden)), "b1"),
                   _param(w2, "w2"), _param(np.zeros((1, width)), "b2"))

    @property
    def width(self) -> int:
        return self.w1.shape[0]

    def residual(self, x: Tensor) -> Tensor:
        """F(x): affine, relu, affine (no skip)."""
        if x.data.ndim != 2 or x.shape[1] != self.width:
            raise ShapeError("block_forward", x.shape, self.w1.shape)
        ones = Tensor(np.ones((x.shape[0], 1)))
        h = relu(matmul(x, self.w1) + matmul(ones, self.b1))
        return matmul(h, self.w2) + matmul(ones, self.b2)

    def parameters(self) -> list[Tensor]:
        return [self.w1, self.b1, self.w2, self.b2]

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return [("w1", self.w1), ("b1", self.b1), ("w2", self.w2), ("b2", self.b2)]

    def copy(self) -> "ResidualBlock":
        return ResidualBlock(*(_param(p.data.copy(), p.name) for p in self.parameters()))


def block_forward(block: ResidualBlock, x: Tensor) -> Tensor:
    x = as_tensor(x)
    return block.residual(x) + x


@dataclass
class BlockPair:
    frozen: ResidualBlock
    tuned: ResidualBlock

    @classmethod
    def from_source(cls, block: ResidualBlock) -> "BlockPair":
        return cls(frozen=block, tuned=block.copy())


@dataclass
class Backbone:
    stem: Linear
    blocks: list[BlockPair]
    head: Linear
    frozen_prefix: int = 0

    def __post_init__(self):
        if not self.blocks:
            raise ValueError("backbone needs at least one block")
        if not 0 <= self.frozen_prefix <= len(self.blocks):
            raise ValueError(f"frozen_prefix {self.frozen_prefix} outside [0, {len(self.blocks)}]")

    @classmethod
    def init(cls, rng: np.random.Generator, input_dim: int, width: int, hidden: int,
             num_blocks: int, num_classes: int, frozen_prefix: int = 0) -> "Backbone":
        stem = Linear.init(rng, input_dim, width, name="stem")
        out_scale = 1.0 / np.sqrt(num_blocks)
        blocks = [BlockPair.from_source(ResidualBlock.init(rng, width, hidden, out_scale))
                  for _ in range(num_blocks)]
        head = Linear.init(rng, width, num_classes, name="head")
        return cls(stem, blocks, head, frozen_prefix)

    @property
    def num_blocks(self) -> int:
        return len(self.blocks)

    @property
    def num_routable(self) -> int:
        return len(self.blocks) - self.frozen_prefix

    @property
    def input_dim(self) -> int:
        return self.stem.w.shape[0]

    @property
    def width(self) -> int:
        return self.stem.w.shape[1]

    @property
    def hidden(self) -> int:
        return self.blocks[0].frozen.w1.shape[1]

    @property
    def num_classes(self) -> int:
        return self.head.w.shape[1]

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        yield "stem.w", self.stem.w
        yield "stem.b", self.stem.b
        for i, pair in enumerate(self.blocks):
            for which in ("frozen", "tuned"):
                for pname, p in getattr(pair, which).named_parameters():
                    yield f"blocks.{i}.{which}.{pname}", p
        yield "head.w", self.head.w
        yield "head.b", self.head.b

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def reset_head(self, rng: np.random.Generator, num_classes: int | None = None) -> None:
        self.head = Linear.init(rng, self.width, num_classes or self.num_classes, name="head")

    def commit_tuned(self) -> None:
        """Make the tuned copies the new source blocks (end of source pre-training)."""
        self.blocks = [BlockPair.from_source(pair.tuned.copy()) for pair in self.blocks]


@dataclass
class PolicyNetwork:
    hidden: Linear
    out: Linear
    num_routable: int

    @classmethod
    def init(cls, rng: np.random.Generator, input_dim: int, num_routable: int, hidden: int = 32) -> "PolicyNetwork":
        first = Linear.init(rng, input_dim, hidden, std=np.sqrt(2.0 / input_dim), name="policy.hidden")
        # zero output layer: every routing decision starts as a fair coin
        out = Linear(_param(np.zeros((hidden, 2 * num_routable)), "policy.out.w"),
                     _param(np.zeros((1, 2 * num_routable)), "policy.out.b"))
        return cls(first, out, num_routable)

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        yield "policy.hidden.w", self.hidden.w
        yield "policy.hidden.b", self.hidden.b
        yield "policy.out.w", self.out.w
        yield "policy.out.b", self.out.b

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]


def policy_logits(policy: PolicyNetwork, x) -> Tensor:
    """Per-example routing logits, shape (batch, routable blocks, 2); column 1 is fine-tune."""
    x = as_tensor(x)
    flat = policy.out(relu(policy.hidden(x)))
    return reshape(flat, (x.shape[0], policy.num_routable, 2))


@dataclass
class RouteDecision:
    hard: np.ndarray  # (batch, routable) in {0, 1}
    sample: RelaxedSample | None = None
    logits: Tensor | None = None

    @property
    def batch_size(self) -> int:
        return self.hard.shape[0]


def backbone_forward(backbone: Backbone, x, use_tuned: Sequence[bool] | None = None) -> Tensor:
    """Plain residual chain; position i runs the tuned copy when ``use_tuned[i]``."""
    h = backbone.stem(as_tensor(x))
    for i, pair in enumerate(backbone.blocks):
        block = pair.tuned if use_tuned is not None and use_tuned[i] else pair.frozen
        h = block_forward(block, h)
    return backbone.head(h)


def frozen_forward(backbone: Backbone, x) -> Tensor:
    return backbone_forward(backbone, x, None)


def _onehot(bits: np.ndarray) -> np.ndarray:
    out = np.zeros(bits.shape + (2,))
    np.put_along_axis(out, bits[..., None].astype(np.intp), 1.0, axis=-1)
    return out


def spottune_forward(backbone: Backbone, policy: PolicyNetwork | None, x,
                     rng: np.random.Generator | None = None, *, tau: float = DEFAULT_TAU,
                     routing: str = "sampled", forced: np.ndarray | None = None) -> tuple[Tensor, RouteDecision]:
    """Route every example per block between the frozen and the tuned copy.

    ``routing`` is "sampled" (Gumbel-Max with straight-through gradients) or
    "argmax" (deterministic).  ``forced`` overrides the policy with a fixed
    (batch, routable) 0/1 matrix.
    """
    x = as_tensor(x)
    batch = x.shape[0]
    n_route = backbone.num_routable
    h = backbone.stem(x)
    for pair in backbone.blocks[:backbone.frozen_prefix]:
        h = block_forward(pair.frozen, h)

    if forced is not None:
        bits = np.asarray(forced).astype(np.int8).reshape(batch, n_route)
        hard = Tensor(_onehot(bits))
        decision = RouteDecision(bits)
    else:
        if policy is None:
            raise ValueError("a policy network is required unless decisions are forced")
        beta = policy_logits(policy, x)
        if routing == "argmax":
            bits = (beta.data[..., 1] > beta.data[..., 0]).astype(np.int8)
            hard = Tensor(_onehot(bits))
            decision = RouteDecision(bits, logits=beta)
        elif routing == "sampled":
            if rng is None:
                raise ValueError("sampled routing needs an rng stream")
            noise = sample_gumbel((batch, n_route, 2), rng, stream="routing")
            sample = straight_through(beta, noise, tau)
            bits = sample.index.astype(np.int8)
            hard = sample.hard
            decision = RouteDecision(bits, sample=sample, logits=beta)
        else:
            raise ValueError(f"unknown routing {routing!r}")

    ones_row = Tensor(np.ones((1, backbone.width)))
    ones = Tensor(np.ones((batch, backbone.width)))
    for l, pair in enumerate(backbone.blocks[backbone.frozen_prefix:]):
        gate = matmul(hard[:, l, 1:2], ones_row)
        tuned = pair.tuned.residual(h)
        frozen = pair.frozen.residual(h)
        h = gate * tuned + (ones - gate) * frozen + h
    return backbone.head(h), decision


@dataclass(frozen=True)
class ParameterCounts:
    stem: int
    frozen_blocks: int
    tuned_blocks: int
    head: int
    policy: int
    trainable: int
    single_block: int = field(default=0)

    @property
    def backbone(self) -> int:
        return self.stem + self.frozen_blocks + self.tuned_blocks + self.head

    @property
    def total(self) -> int:
        return self.backbone + self.policy


def count_parameters(backbone: Backbone, policy: PolicyNetwork | None = None,
                     trainable: Sequence[Tensor] | None = None) -> ParameterCounts:
    def n(params):
        return int(sum(p.data.size for p in params))

    everything = backbone.parameters() + (policy.parameters() if policy else [])
    trainable = [p for p in everything if p.requires_grad] if trainable is None else trainable
    return ParameterCounts(
        stem=n(backbone.stem.parameters()),
        frozen_blocks=n(p for pair in backbone.blocks for p in pair.frozen.parameters()),
        tuned_blocks=n(p for pair in backbone.blocks for p in pair.tuned.parameters()),
        head=n(backbone.head.parameters()),
        policy=n(policy.parameters()) if policy else 0,
        trainable=n(trainable),
        single_block=n(backbone.blocks[0].frozen.parameters()),
    )
