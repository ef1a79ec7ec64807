"""Command-line entry point: ``spottune <command> [--config FILE] [key=value ...]``."""
from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

import numpy as np

from .binio import FormatError, atomic_write
from .checkpoint import Checkpoint, backbone_digest, file_digest, frozen_digest, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, load_config
from .data import LabeledSet, generate_source, generate_target, load_dataset, save_dataset
from .metrics import export_decathlon, export_policy_heatmap, export_usage_histogram, read_domain_errors
from .model import Backbone
from .training import TransferModel, evaluate, prepare_transfer, pretrain, train

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2

COMMANDS = ("pretrain", "finetune", "eval", "export-policy", "score-decathlon", "gen-data")


def _require_file(cfg: RunConfig, key: str) -> Path:
    value = getattr(cfg, key)
    if not value:
        raise ConfigError(key, "required for this command")
    path = Path(value)
    if not path.is_file():
        raise ConfigError(key, f"file not found: {value}")
    return path


def _source_sets(cfg: RunConfig) -> tuple[LabeledSet, LabeledSet]:
    if cfg.train_data:
        return load_dataset(_require_file(cfg, "train_data")), load_dataset(_require_file(cfg, "eval_data"))
    spec = cfg.source_task()
    return generate_source(spec, "train"), generate_source(spec, "eval")


def _target_sets(cfg: RunConfig) -> tuple[LabeledSet, LabeledSet]:
    if cfg.train_data:
        return load_dataset(_require_file(cfg, "train_data")), load_dataset(_require_file(cfg, "eval_data"))
    spec, seed = cfg.source_task(), cfg.target_seed_value()
    return generate_target(spec, cfg.shift, seed, "train"), generate_target(spec, cfg.shift, seed, "eval")


def _target_eval_set(cfg: RunConfig) -> LabeledSet:
    if cfg.eval_data:
        return load_dataset(_require_file(cfg, "eval_data"))
    return generate_target(cfg.source_task(), cfg.shift, cfg.target_seed_value(), "eval")


def _out(cfg: RunConfig, name: str) -> Path:
    return Path(cfg.out_dir) / name


def cmd_gen_data(cfg: RunConfig) -> None:
    generated = dataclasses.replace(cfg, train_data="", eval_data="")
    src_train, src_eval = _source_sets(generated)
    tgt_train, tgt_eval = _target_sets(generated)
    for name, ds in (("source_train", src_train), ("source_eval", src_eval),
                     ("target_train", tgt_train), ("target_eval", tgt_eval)):
        save_dataset(_out(cfg, f"{name}.sptd"), ds)
        print(f"wrote {_out(cfg, name + '.sptd')} ({len(ds)} rows)")


def cmd_pretrain(cfg: RunConfig) -> None:
    train_set, eval_set = _source_sets(cfg)
    rng = np.random.default_rng([cfg.seed_init, 1])
    backbone = Backbone.init(rng, train_set.input_dim, cfg.width, cfg.hidden, cfg.num_blocks,
                             train_set.num_classes, cfg.frozen_prefix)
    result = pretrain(backbone, train_set, eval_set, cfg.pretrain_settings())
    save_checkpoint(_out(cfg, "source.sptc"), Checkpoint(TransferModel(backbone), "", cfg.to_text()))
    atomic_write(_out(cfg, "pretrain_metrics.csv"), result.log.to_csv())
    last = result.log.last("eval") if eval_set is not None and len(eval_set) else result.log.rows[-1]
    print(f"source accuracy={last['accuracy']:.4f} checkpoint={_out(cfg, 'source.sptc')}")


def cmd_finetune(cfg: RunConfig) -> None:
    source_path = _require_file(cfg, "source")
    source = load_checkpoint(source_path)
    train_set, eval_set = _target_sets(cfg)
    if train_set.input_dim != source.model.backbone.input_dim:
        raise ConfigError("train_data", "input dimension does not match the source checkpoint")
    mode = cfg.run_mode()
    model = prepare_transfer(source.model.backbone, mode, np.random.default_rng([cfg.seed_init, 2]),
                             num_classes=train_set.num_classes, frozen_prefix=cfg.frozen_prefix,
                             policy_hidden=cfg.policy_hidden)
    result = train(model, mode, train_set, eval_set, cfg.finetune_settings())
    save_checkpoint(_out(cfg, "model.sptc"), Checkpoint(result.model, file_digest(source_path), cfg.to_text()))
    atomic_write(_out(cfg, "metrics.csv"), result.log.to_csv())
    if result.log.rows:
        last = result.log.last("eval") if len(eval_set) else result.log.last("train")
        acc, sum_v = last["accuracy"], last["sum_v"]
    else:  # zero epochs: report the untouched model
        res = evaluate(result.model, eval_set, routing=cfg.routing, eval_seed=cfg.seed_eval, tau=cfg.tau)
        acc, sum_v = res.accuracy, float(res.decisions.mean(axis=0).sum()) if res.decisions.size else 0.0
    print(f"mode={mode.name} accuracy={acc:.4f} sum_v={sum_v:.4f} checkpoint={_out(cfg, 'model.sptc')}")


def cmd_eval(cfg: RunConfig) -> None:
    ckpt = load_checkpoint(_require_file(cfg, "checkpoint"))
    eval_set = _target_eval_set(cfg)
    res = evaluate(ckpt.model, eval_set, routing=cfg.routing, eval_seed=cfg.seed_eval, tau=cfg.tau)
    bb = ckpt.model.backbone
    sum_v = float(res.decisions.mean(axis=0).sum()) if res.decisions.size else 0.0
    rows = [("accuracy", format(res.accuracy, ".17g")), ("loss", format(res.loss, ".17g")),
            ("examples", str(len(eval_set))), ("sum_v", format(sum_v, ".17g")),
            ("frozen_hash", frozen_digest(bb)), ("backbone_hash", backbone_digest(bb))]
    atomic_write(_out(cfg, "eval.csv"), "metric,value\n" + "".join(f"{k},{v}\n" for k, v in rows))
    for k, v in rows:
        print(f"{k}={v}")


def cmd_export_policy(cfg: RunConfig) -> None:
    ckpt = load_checkpoint(_require_file(cfg, "checkpoint"))
    if not ckpt.model.routed:
        raise ConfigError("checkpoint", "model has no policy network to export")
    eval_set = _target_eval_set(cfg)
    res = evaluate(ckpt.model, eval_set, routing=cfg.routing, eval_seed=cfg.seed_eval, tau=cfg.tau)
    first = ckpt.model.backbone.frozen_prefix
    atomic_write(_out(cfg, "policy_heatmap.csv"), export_policy_heatmap(res.decisions, first))
    atomic_write(_out(cfg, "block_usage.csv"), export_usage_histogram(res.decisions))
    print(f"wrote {_out(cfg, 'policy_heatmap.csv')} and {_out(cfg, 'block_usage.csv')}")


def cmd_score_decathlon(cfg: RunConfig) -> None:
    path = _require_file(cfg, "scores")
    try:
        domains = read_domain_errors(path.read_text(encoding="utf-8"))
    except ValueError as exc:
        raise ConfigError("scores", str(exc)) from exc
    text = export_decathlon(domains)
    atomic_write(_out(cfg, "decathlon.csv"), text)
    print(text.strip().splitlines()[-1].replace("total,,,", "S="))


HANDLERS = {
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
    "export-policy": cmd_export_policy,
    "score-decathlon": cmd_score_decathlon,
    "gen-data": cmd_gen_data,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="spottune", description="Adaptive per-example fine-tuning on synthetic transfer tasks.")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", "-c", help="flat key=value config file")
    parser.add_argument("overrides", nargs="*", metavar="KEY=VALUE", help="override config keys")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_intermixed_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    try:
        cfg = load_config(args.config, args.overrides)
        HANDLERS[args.command](cfg)
    except (ConfigError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FloatingPointError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
