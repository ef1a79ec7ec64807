"""SPTC checkpoint files: model dimensions, named float64 parameter blobs, provenance."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from .binio import FormatError, Reader, atomic_write, f64_bytes, text, u32
from .model import Backbone, BlockPair, Linear, PolicyNetwork, ResidualBlock
from .tensor import Tensor
from .training import TransferModel

SPTC_MAGIC = b"SPTC"
SPTC_VERSION = 1
MASK_BLOB = "route.use_tuned"


@dataclass
class Checkpoint:
    model: TransferModel
    source_hash: str = ""
    config_text: str = ""


def digest_parameters(named: Iterable[tuple[str, Tensor]]) -> str:
    h = hashlib.sha256()
    for name, p in named:
        h.update(name.encode())
        h.update(np.asarray(p.shape, dtype="<u8").tobytes())
        h.update(f64_bytes(p.data))
    return h.hexdigest()


def frozen_digest(backbone: Backbone) -> str:
    """Hash of the source blocks (the part no fine-tuning mode may touch)."""
    return digest_parameters((n, p) for n, p in backbone.named_parameters() if ".frozen." in n)


def backbone_digest(backbone: Backbone, include_head: bool = False) -> str:
    """Hash of the parameters a run actually uses, excluding the (per-task) head."""
    named = []
    for n, p in backbone.named_parameters():
        if n.startswith("head.") and not include_head:
            continue
        named.append((n, p))
    return digest_parameters(named)


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    model = ckpt.model
    bb = model.backbone
    policy_hidden = model.policy.hidden.w.shape[1] if model.policy else 0
    blobs: list[tuple[str, np.ndarray]] = [(n, p.data) for n, p in bb.named_parameters()]
    if model.policy:
        blobs += [(n, p.data) for n, p in model.policy.named_parameters()]
    if model.use_tuned is not None:
        blobs.append((MASK_BLOB, np.array(model.use_tuned, dtype=np.float64)))
    out = [SPTC_MAGIC, u32(SPTC_VERSION)]
    for dim in (bb.input_dim, bb.width, bb.hidden, bb.num_blocks, bb.frozen_prefix, bb.num_classes, policy_hidden):
        out.append(u32(dim))
    out += [text(ckpt.source_hash), text(ckpt.config_text), u32(len(blobs))]
    for name, arr in blobs:
        out += [text(name), u32(arr.ndim)] + [u32(s) for s in arr.shape] + [f64_bytes(arr)]
    return b"".join(out)


def decode_checkpoint(buf: bytes) -> Checkpoint:
    r = Reader(buf)
    r.magic(SPTC_MAGIC)
    at = r.pos
    version = r.u32("version")
    if version != SPTC_VERSION:
        raise FormatError(f"unsupported SPTC version {version}", at)
    at = r.pos
    names = ("input_dim", "width", "hidden", "num_blocks", "frozen_prefix", "num_classes", "policy_hidden")
    dims = {n: r.u32(n) for n in names}
    if min(dims[n] for n in names if n not in ("frozen_prefix", "policy_hidden")) == 0:
        raise FormatError("zero model dimension", at)
    if dims["frozen_prefix"] > dims["num_blocks"]:
        raise FormatError("frozen_prefix exceeds num_blocks", at)
    source_hash = r.text("source hash")
    config_text = r.text("config echo")
    count = r.u32("blob count")
    blobs: dict[str, np.ndarray] = {}
    for _ in range(count):
        at = r.pos
        name = r.text("blob name")
        ndim = r.u32("blob rank")
        if ndim > 8:
            raise FormatError(f"blob {name!r} has rank {ndim}", at)
        shape = tuple(r.u32("blob dim") for _ in range(ndim))
        if name in blobs:
            raise FormatError(f"duplicate blob {name!r}", at)
        blobs[name] = r.f64_array(shape, name)
    r.end()
    return Checkpoint(_build_model(dims, blobs, len(buf)), source_hash, config_text)


def _build_model(dims: dict[str, int], blobs: dict[str, np.ndarray], end: int) -> TransferModel:
    def take(name: str, shape: tuple[int, ...]) -> Tensor:
        if name not in blobs:
            raise FormatError(f"missing parameter {name!r}", end)
        arr = blobs.pop(name)
        if arr.shape != shape:
            raise FormatError(f"parameter {name!r} has shape {arr.shape}, expected {shape}", end)
        return Tensor(arr.copy(), name=name)

    d_in, w, h = dims["input_dim"], dims["width"], dims["hidden"]
    stem = Linear(take("stem.w", (d_in, w)), take("stem.b", (1, w)))
    pairs = []
    for i in range(dims["num_blocks"]):
        copies = {}
        for which in ("frozen", "tuned"):
            p = f"blocks.{i}.{which}."
            copies[which] = ResidualBlock(take(p + "w1", (w, h)), take(p + "b1", (1, h)),
                                          take(p + "w2", (h, w)), take(p + "b2", (1, w)))
        pairs.append(BlockPair(copies["frozen"], copies["tuned"]))
    c = dims["num_classes"]
    head = Linear(take("head.w", (w, c)), take("head.b", (1, c)))
    backbone = Backbone(stem, pairs, head, dims["frozen_prefix"])
    policy = None
    if dims["policy_hidden"]:
        ph, r = dims["policy_hidden"], backbone.num_routable
        policy = PolicyNetwork(Linear(take("policy.hidden.w", (d_in, ph)), take("policy.hidden.b", (1, ph))),
                               Linear(take("policy.out.w", (ph, 2 * r)), take("policy.out.b", (1, 2 * r))), r)
    use_tuned = None
    if MASK_BLOB in blobs:
        mask = take(MASK_BLOB, (dims["num_blocks"],)).data
        use_tuned = tuple(bool(v) for v in mask)
    if blobs:
        raise FormatError(f"unexpected blobs {sorted(blobs)}", end)
    return TransferModel(backbone, policy, use_tuned)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    atomic_write(path, encode_checkpoint(ckpt))


def load_checkpoint(path) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes())


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
