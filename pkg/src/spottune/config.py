"""Flat ``key=value`` run configuration."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from .data import TaskSpec
from .losses import LossWeights
from .training import MODES, PRESETS, RunMode, Schedule, TrainSettings


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        self.key = key
        super().__init__(f"{key}: {message}")


@dataclass(frozen=True)
class RunConfig:
    mode: str = "spottune"
    k: int = 3
    fraction: float = 0.5
    # model
    num_blocks: int = 12
    width: int = 32
    hidden: int = 32
    frozen_prefix: int = 0
    policy_hidden: int = 32
    # tasks
    input_dim: int = 16
    num_classes: int = 4
    num_train: int = 2048
    num_eval: int = 512
    separation: float = 1.0
    spread: float = 3.0
    shift: float = 0.5
    target_seed: int | None = None
    # optimisation; None falls back to the preset
    preset: str = "desk"
    epochs: int | None = None
    lr: float | None = None
    policy_lr: float | None = None
    decay_epochs: tuple[int, ...] | None = None
    decay_factor: float = 0.1
    batch_size: int | None = None
    momentum: float = 0.9
    pretrain_epochs: int = 10
    pretrain_lr: float = 1e-2
    pretrain_decay_epochs: tuple[int, ...] = (7,)
    lambda1: float = 0.5
    lambda2: float = 0.1
    tau: float = 5.0
    routing: str = "sampled"
    # seeds
    seed_init: int = 0
    seed_data: int = 0
    seed_train: int = 0
    seed_eval: int = 0
    # files
    out_dir: str = "runs"
    source: str = ""
    checkpoint: str = ""
    train_data: str = ""
    eval_data: str = ""
    scores: str = ""

    def __post_init__(self):
        self._check()

    def _check(self) -> None:
        def need(ok: bool, key: str, msg: str):
            if not ok:
                raise ConfigError(key, msg)

        need(self.mode in MODES, "mode", f"must be one of {', '.join(MODES)}")
        need(self.preset in PRESETS, "preset", f"must be one of {', '.join(PRESETS)}")
        need(self.routing in ("sampled", "argmax"), "routing", "must be sampled or argmax")
        for key in ("num_blocks", "width", "hidden", "policy_hidden", "input_dim", "num_classes"):
            need(getattr(self, key) >= 1, key, "must be >= 1")
        need(0 <= self.frozen_prefix <= self.num_blocks, "frozen_prefix", f"must lie in [0, {self.num_blocks}]")
        if self.mode == "last-k-ft":
            need(1 <= self.k <= self.num_blocks, "k", f"must lie in [1, {self.num_blocks}]")
        if self.mode == "spottune-global-k":
            need(0 <= self.k <= self.num_blocks - self.frozen_prefix, "k",
                 f"must lie in [0, {self.num_blocks - self.frozen_prefix}]")
        need(0.0 < self.fraction <= 1.0, "fraction", "must lie in (0, 1]")
        need(0.0 <= self.shift <= 1.0, "shift", "must lie in [0, 1]")
        need(self.num_train >= self.num_classes, "num_train", "must be >= num_classes")
        need(self.num_eval >= 0, "num_eval", "must be >= 0")
        need(self.separation > 0 and self.spread > 0, "spread" if self.separation > 0 else "separation",
             "must be positive")
        need(self.tau > 0, "tau", "must be positive")
        need(self.lambda1 >= 0, "lambda1", "must be >= 0")
        need(self.lambda2 >= 0, "lambda2", "must be >= 0")
        need(0.0 <= self.momentum < 1.0, "momentum", "must lie in [0, 1)")
        need(self.decay_factor > 0, "decay_factor", "must be positive")
        need(self.pretrain_epochs >= 0, "pretrain_epochs", "must be >= 0")
        need(self.pretrain_lr >= 0, "pretrain_lr", "must be >= 0")
        for key in ("epochs", "batch_size"):
            value = getattr(self, key)
            need(value is None or value >= (1 if key == "batch_size" else 0), key, "out of range")
        for key in ("lr", "policy_lr"):
            value = getattr(self, key)
            need(value is None or value >= 0, key, "must be >= 0")
        epochs = self.resolved_epochs()
        decays = self.resolved_decays()
        need(all(b > a for a, b in zip(decays, decays[1:])), "decay_epochs", "must be strictly increasing")
        need(all(0 < d <= epochs for d in decays), "decay_epochs", f"must lie within 1..{epochs}")
        pd = self.pretrain_decay_epochs
        need(all(b > a for a, b in zip(pd, pd[1:])) and all(0 < d <= max(self.pretrain_epochs, 1) for d in pd),
             "pretrain_decay_epochs", "must be strictly increasing and within pretrain_epochs")

    # preset resolution
    def resolved_epochs(self) -> int:
        return PRESETS[self.preset].epochs if self.epochs is None else self.epochs

    def resolved_decays(self) -> tuple[int, ...]:
        if self.decay_epochs is not None:
            return self.decay_epochs
        preset = PRESETS[self.preset]
        if self.epochs is None or self.epochs == preset.epochs:
            return preset.decay_epochs
        return preset.scaled(self.epochs).decay_epochs

    def run_mode(self) -> RunMode:
        return RunMode.make(self.mode, k=self.k, fraction=self.fraction)

    def source_task(self) -> TaskSpec:
        return TaskSpec(self.input_dim, self.num_classes, self.num_train, self.num_eval, 0.0,
                        self.seed_data, self.separation, self.spread)

    def target_seed_value(self) -> int:
        return self.seed_data + 1 if self.target_seed is None else self.target_seed

    def finetune_settings(self) -> TrainSettings:
        preset = PRESETS[self.preset]
        decays = self.resolved_decays()
        return TrainSettings(
            epochs=self.resolved_epochs(),
            batch_size=preset.batch_size if self.batch_size is None else self.batch_size,
            main=Schedule(preset.lr if self.lr is None else self.lr, decays, self.decay_factor),
            policy=Schedule(preset.policy_lr if self.policy_lr is None else self.policy_lr, decays, self.decay_factor),
            momentum=self.momentum, tau=self.tau,
            weights=LossWeights(self.lambda1, self.lambda2, self.k),
            train_seed=self.seed_train, eval_seed=self.seed_eval, routing=self.routing)

    def pretrain_settings(self) -> TrainSettings:
        preset = PRESETS[self.preset]
        return TrainSettings(
            epochs=self.pretrain_epochs,
            batch_size=preset.batch_size if self.batch_size is None else self.batch_size,
            main=Schedule(self.pretrain_lr, self.pretrain_decay_epochs, self.decay_factor),
            policy=Schedule(0.0), momentum=self.momentum, tau=self.tau,
            train_seed=self.seed_train, eval_seed=self.seed_eval, routing=self.routing)

    # text form
    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if value is None:
                continue
            if isinstance(value, tuple):
                value = ",".join(str(v) for v in value)
            elif isinstance(value, float):
                value = repr(value)
            lines.append(f"{f.name}={value}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_pairs(cls, pairs: dict[str, str], base: "RunConfig | None" = None) -> "RunConfig":
        known = {f.name: f for f in fields(cls)}
        values = {}
        for key, raw in pairs.items():
            if key not in known:
                raise ConfigError(key, "unknown key")
            values[key] = _parse_value(key, raw, known[key].type)
        try:
            return dataclasses.replace(base or cls(), **values)
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(next(iter(values), "config"), str(exc)) from exc


def parse_pairs(text: str, origin: str = "config") -> dict[str, str]:
    pairs: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}:{lineno}", f"expected key=value, got {line!r}")
        key, _, value = line.partition("=")
        pairs[key.strip()] = value.strip()
    return pairs


def load_config(path=None, overrides: list[str] | None = None) -> RunConfig:
    pairs: dict[str, str] = {}
    if path:
        p = Path(path)
        if not p.is_file():
            raise ConfigError("config", f"file not found: {path}")
        pairs.update(parse_pairs(p.read_text(encoding="utf-8"), str(path)))
    for item in overrides or []:
        pairs.update(parse_pairs(item, "override"))
    return RunConfig.from_pairs(pairs)


def _parse_value(key: str, raw: str, annotation: str):
    try:
        if raw.lower() == "none" and "None" in annotation:
            return None
        if "tuple" in annotation:
            return tuple(int(v) for v in raw.split(",") if v.strip()) if raw.strip() else ()
        if raw == "" and "None" in annotation:
            return None
        if annotation.startswith("int"):
            return int(raw)
        if annotation.startswith("float"):
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(key, f"cannot parse {raw!r}") from exc
