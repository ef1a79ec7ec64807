"""SGD with momentum, step schedules, fine-tuning modes, and the training/evaluation loops."""
from __future__ import annotations

import io
import csv
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .data import LabeledSet
from .losses import (LossWeights, cross_entropy, entropy_loss, global_k_loss, hard_fractions,
                     total_loss, usage_fractions)
from .model import Backbone, PolicyNetwork, RouteDecision, backbone_forward, spottune_forward
from .tensor import NumericError, Tape, Tensor

MODES = ("spottune", "spottune-global-k", "standard-ft", "feature-extractor", "stochastic-ft", "last-k-ft")
ROUTED_MODES = ("spottune", "spottune-global-k")

METRIC_COLUMNS = ("epoch", "split", "accuracy", "l_c", "l_k", "l_e", "sum_v", "lr_main", "lr_policy")


class TrainingDiverged(FloatingPointError):
    def __init__(self, epoch: int, step: int, detail: str):
        self.epoch = epoch
        self.step = step
        super().__init__(f"non-finite value at epoch {epoch}, step {step}: {detail}")


@dataclass
class OptimizerState:
    lr: float
    momentum: float = 0.9
    velocity: dict[int, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("learning rate must be non-negative")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")


def sgd_step(params: Sequence[Tensor], state: OptimizerState) -> None:
    """v <- momentum * v + grad; param <- param - lr * v; grads are cleared."""
    for p in params:
        if p.grad is None:
            raise ValueError(f"missing gradient for trainable parameter {p.name or p.node_id}")
    for p in params:
        v = state.velocity.get(p.node_id)
        v = p.grad.copy() if v is None else state.momentum * v + p.grad
        state.velocity[p.node_id] = v
        if state.lr != 0.0:
            p.data -= state.lr * v
        p.grad = None


@dataclass(frozen=True)
class Schedule:
    initial_lr: float
    decay_epochs: tuple[int, ...] = ()
    factor: float = 0.1

    def __post_init__(self):
        if self.initial_lr < 0 or self.factor <= 0:
            raise ValueError("learning rate must be >= 0 and decay factor > 0")
        if any(b <= a for a, b in zip(self.decay_epochs, self.decay_epochs[1:])):
            raise ValueError(f"decay epochs must be strictly increasing: {self.decay_epochs}")

    def lr_at(self, epoch: int) -> float:
        return self.initial_lr * self.factor ** sum(1 for d in self.decay_epochs if d <= epoch)


@dataclass(frozen=True)
class Preset:
    lr: float
    policy_lr: float
    epochs: int
    decay_epochs: tuple[int, ...]
    batch_size: int
    factor: float = 0.1

    def scaled(self, epochs: int) -> "Preset":
        """Same schedule shape compressed (or stretched) to ``epochs``."""
        decays = tuple(sorted({max(1, round(d * epochs / self.epochs)) for d in self.decay_epochs}))
        return replace(self, epochs=epochs, decay_epochs=tuple(d for d in decays if d < epochs))


PRESETS = {
    "finetune": Preset(lr=1e-2, policy_lr=1e-4, epochs=40, decay_epochs=(15, 30), batch_size=32),
    "decathlon": Preset(lr=0.1, policy_lr=1e-2, epochs=110, decay_epochs=(40, 60, 80), batch_size=128),
    # synthetic-task default: policy needs a larger step to move in a few epochs
    "desk": Preset(lr=1e-2, policy_lr=0.1, epochs=30, decay_epochs=(20,), batch_size=32),
}


@dataclass(frozen=True)
class RunMode:
    name: str
    k: int | None = None
    fraction: float | None = None

    def __post_init__(self):
        if self.name not in MODES:
            raise ValueError(f"unknown mode {self.name!r}; choose from {', '.join(MODES)}")
        needs_k = self.name in ("last-k-ft", "spottune-global-k")
        if needs_k != (self.k is not None):
            raise ValueError(f"mode {self.name} {'requires' if needs_k else 'does not take'} k")
        if (self.name == "stochastic-ft") != (self.fraction is not None):
            raise ValueError("fraction is required by stochastic-ft and only by it")

    @classmethod
    def make(cls, name: str, k: int = 3, fraction: float = 0.5) -> "RunMode":
        return cls(name,
                   k if name in ("last-k-ft", "spottune-global-k") else None,
                   fraction if name == "stochastic-ft" else None)

    @property
    def routed(self) -> bool:
        return self.name in ROUTED_MODES


@dataclass
class TransferModel:
    """A backbone plus how it is run: routed by a policy, or a fixed frozen/tuned mask."""

    backbone: Backbone
    policy: PolicyNetwork | None = None
    use_tuned: tuple[bool, ...] | None = None

    @property
    def routed(self) -> bool:
        return self.policy is not None

    def forward(self, x, rng=None, *, routing: str = "sampled", tau: float = 5.0,
                forced=None) -> tuple[Tensor, RouteDecision | None]:
        if self.routed or forced is not None:
            return spottune_forward(self.backbone, self.policy, x, rng, tau=tau, routing=routing, forced=forced)
        return backbone_forward(self.backbone, x, self.use_tuned), None

    def parameters(self) -> list[Tensor]:
        return self.backbone.parameters() + (self.policy.parameters() if self.policy else [])


@dataclass
class TrainablePlan:
    main: list[Tensor]
    policy: list[Tensor]
    use_tuned: tuple[bool, ...]
    tuned_blocks: tuple[int, ...]

    @property
    def all(self) -> list[Tensor]:
        return self.main + self.policy


def configure_mode(backbone: Backbone, policy: PolicyNetwork | None, mode: RunMode,
                   rng: np.random.Generator) -> TrainablePlan:
    """Mark exactly the parameters ``mode`` may change as requiring gradients."""
    n = backbone.num_blocks
    if mode.name == "standard-ft":
        tuned = tuple(range(n))
    elif mode.name == "feature-extractor":
        tuned = ()
    elif mode.name == "last-k-ft":
        if not 1 <= mode.k <= n:
            raise ValueError(f"k={mode.k} outside [1, {n}]")
        tuned = tuple(range(n - mode.k, n))
    elif mode.name == "stochastic-ft":
        if not 0.0 < mode.fraction <= 1.0:
            raise ValueError(f"fraction {mode.fraction} outside (0, 1]")
        count = int(n * mode.fraction)
        tuned = tuple(sorted(int(i) for i in rng.choice(n, size=count, replace=False)))
    else:
        if mode.name == "spottune-global-k" and not 0 <= mode.k <= backbone.num_routable:
            raise ValueError(f"k={mode.k} outside [0, {backbone.num_routable}]")
        if policy is None:
            raise ValueError(f"mode {mode.name} needs a policy network")
        tuned = tuple(range(backbone.frozen_prefix, n))

    main = [p for i in tuned for p in backbone.blocks[i].tuned.parameters()]
    if mode.name != "feature-extractor":  # the stem adapts in every mode that touches the backbone
        main = backbone.stem.parameters() + main
    main = main + backbone.head.parameters()
    pol = policy.parameters() if mode.routed else []

    trainable = {p.node_id for p in main + pol}
    everything = backbone.parameters() + (policy.parameters() if policy else [])
    for p in everything:
        p.requires_grad = p.node_id in trainable
        p.grad = None
    mask = tuple(i in tuned for i in range(n))
    return TrainablePlan(main, pol, mask, tuned)


@dataclass(frozen=True)
class TrainSettings:
    epochs: int = 30
    batch_size: int = 32
    main: Schedule = Schedule(1e-2, (20,))
    policy: Schedule = Schedule(0.1, (20,))
    momentum: float = 0.9
    tau: float = 5.0
    weights: LossWeights = LossWeights()
    train_seed: int = 0
    eval_seed: int = 0
    routing: str = "sampled"
    eval_every: int = 1

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size <= 0:
            raise ValueError("epochs must be >= 0 and batch_size > 0")
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        for sched in (self.main, self.policy):
            if sched.decay_epochs and sched.decay_epochs[-1] > self.epochs:
                raise ValueError(f"decay epoch {sched.decay_epochs[-1]} beyond {self.epochs} epochs")
        if self.routing not in ("sampled", "argmax"):
            raise ValueError(f"routing must be sampled or argmax, got {self.routing!r}")


@dataclass
class MetricsLog:
    rows: list[dict] = field(default_factory=list)

    def add(self, **row) -> None:
        self.rows.append({c: row[c] for c in METRIC_COLUMNS})

    def last(self, split: str) -> dict:
        return [r for r in self.rows if r["split"] == split][-1]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for r in self.rows:
            w.writerow([_fmt(r[c]) for c in METRIC_COLUMNS])
        return buf.getvalue()


def _fmt(value) -> str:
    if isinstance(value, (float, np.floating)):
        return format(float(value), ".17g")
    return str(value)


@dataclass
class EvalResult:
    accuracy: float
    loss: float
    decisions: np.ndarray  # (n, routable) hard bits; zero columns for unrouted models


def evaluate(model: TransferModel, dataset: LabeledSet, *, routing: str = "sampled", eval_seed: int = 0,
             tau: float = 5.0, chunk: int = 512) -> EvalResult:
    rng = np.random.default_rng([eval_seed, 17])
    n = len(dataset)
    correct = 0
    loss = 0.0
    decisions = []
    for start in range(0, n, chunk):
        x = dataset.inputs[start:start + chunk]
        y = dataset.labels[start:start + chunk]
        logits, dec = model.forward(x, rng, routing=routing, tau=tau)
        correct += int((logits.data.argmax(axis=1) == y).sum())
        loss += cross_entropy(logits, y).item() * len(y)
        decisions.append(dec.hard if dec is not None else np.zeros((len(y), 0), dtype=np.int8))
    bits = np.concatenate(decisions) if decisions else np.zeros((0, 0), dtype=np.int8)
    return EvalResult(correct / n if n else 0.0, loss / n if n else 0.0, bits)


@dataclass
class TrainResult:
    model: TransferModel
    plan: TrainablePlan
    log: MetricsLog


def train(model: TransferModel, mode: RunMode, train_set: LabeledSet, eval_set: LabeledSet | None,
          settings: TrainSettings) -> TrainResult:
    """Fine-tune ``model`` in place according to ``mode`` and return the metrics log."""
    backbone = model.backbone
    plan = configure_mode(backbone, model.policy, mode, np.random.default_rng([settings.train_seed, 13]))
    if not mode.routed:
        model.policy = None
        model.use_tuned = plan.use_tuned
    main_state = OptimizerState(settings.main.initial_lr, settings.momentum)
    policy_state = OptimizerState(settings.policy.initial_lr, settings.momentum)
    rng = np.random.default_rng([settings.train_seed, 11])
    log = MetricsLog()
    n = len(train_set)
    weights = settings.weights
    global_k = mode.name == "spottune-global-k"
    k = mode.k if global_k else weights.k
    baseline_v = np.array(plan.use_tuned, dtype=np.float64)

    for epoch in range(settings.epochs):
        main_state.lr = settings.main.lr_at(epoch)
        policy_state.lr = settings.policy.lr_at(epoch)
        order = rng.permutation(n)
        correct = 0
        sums = {"l_c": 0.0, "l_k": 0.0, "l_e": 0.0}
        epoch_bits = []
        for step, start in enumerate(range(0, n, settings.batch_size)):
            idx = order[start:start + settings.batch_size]
            x, y = train_set.inputs[idx], train_set.labels[idx]
            try:
                with np.errstate(all="ignore"), Tape() as tape:  # non-finite values are raised as NumericError
                    logits, dec = model.forward(x, rng, routing="sampled", tau=settings.tau)
                    lc = cross_entropy(logits, y)
                    loss = lc
                    if mode.routed:
                        v = usage_fractions(dec, relaxed=True)
                        lk, le = global_k_loss(v, k), entropy_loss(v)
                        if global_k:
                            loss = total_loss(lc, lk, le, weights)
                        sums["l_k"] += lk.item() * len(idx)
                        sums["l_e"] += le.item() * len(idx)
                        epoch_bits.append(dec.hard)
                    if loss.requires_grad:
                        tape.backward(loss, params=plan.all)
            except NumericError as exc:
                raise TrainingDiverged(epoch, step, str(exc)) from exc
            sums["l_c"] += lc.item() * len(idx)
            correct += int((logits.data.argmax(axis=1) == y).sum())
            if loss.requires_grad:
                sgd_step(plan.main, main_state)
                sgd_step(plan.policy, policy_state)

        train_v = np.concatenate(epoch_bits).mean(axis=0) if epoch_bits else baseline_v
        log.add(epoch=epoch, split="train", accuracy=correct / n, l_c=sums["l_c"] / n,
                l_k=sums["l_k"] / n, l_e=sums["l_e"] / n, sum_v=float(train_v.sum()),
                lr_main=main_state.lr, lr_policy=policy_state.lr if mode.routed else 0.0)

        last = epoch == settings.epochs - 1
        if eval_set is not None and (last or (epoch + 1) % settings.eval_every == 0):
            res = evaluate(model, eval_set, routing=settings.routing, eval_seed=settings.eval_seed, tau=settings.tau)
            if mode.routed:
                v = hard_fractions(res.decisions)
                lk_e, le_e, sv = global_k_loss(v, k).item(), entropy_loss(v).item(), float(v.values.sum())
            else:
                lk_e, le_e, sv = 0.0, 0.0, float(baseline_v.sum())
            log.add(epoch=epoch, split="eval", accuracy=res.accuracy, l_c=res.loss, l_k=lk_e, l_e=le_e,
                    sum_v=sv, lr_main=main_state.lr, lr_policy=policy_state.lr if mode.routed else 0.0)
    return TrainResult(model, plan, log)


def pretrain(backbone: Backbone, train_set: LabeledSet, eval_set: LabeledSet | None,
             settings: TrainSettings) -> TrainResult:
    """Train every block on the source task, then freeze the result as the source blocks."""
    model = TransferModel(backbone)
    result = train(model, RunMode("standard-ft"), train_set, eval_set, settings)
    backbone.commit_tuned()
    for p in backbone.parameters():
        p.requires_grad = False
    model.use_tuned = None
    return result


def prepare_transfer(source: Backbone, mode: RunMode, rng: np.random.Generator, *,
                     num_classes: int | None = None, frozen_prefix: int | None = None,
                     policy_hidden: int = 32) -> TransferModel:
    """Fresh target model: source blocks, tuned copies equal to them, a new head, a policy if routed."""
    blocks = [type(pair).from_source(pair.frozen.copy()) for pair in source.blocks]
    prefix = source.frozen_prefix if frozen_prefix is None else frozen_prefix
    backbone = Backbone(source.stem.copy(), blocks, source.head.copy(), prefix)
    backbone.reset_head(rng, num_classes or source.num_classes)
    policy = None
    if mode.routed:
        policy = PolicyNetwork.init(rng, backbone.input_dim, backbone.num_routable, policy_hidden)
    return TransferModel(backbone, policy)
