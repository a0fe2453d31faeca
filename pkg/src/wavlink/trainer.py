"""AdamW, cosine-with-warmup schedule, simulated embedding gather, the
training loop and the binary checkpoint format."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from . import diffcore as dc
from .adapt import TrainableMask, apply_lora, build_mask, prepare_adaptation
from .config import ModelConfig, TrainConfig, config_hash, split_flat, to_flat
from .errors import ConfigError, DegenerateEmbeddingError, DimensionError, FormatError, NumericError
from .losses import contrastive_objective
from .rng import SplitMix64
from .towers import DualEncoder, build_model

log = logging.getLogger(__name__)

CKPT_MAGIC = b"WLCK"
CKPT_VERSION = 1


def cosine_warmup_lr(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """Linear warmup to ``lr_peak`` then cosine decay to zero at ``total_steps``."""
    if total_steps <= 0:
        raise ConfigError("total_steps must be positive")
    if not 0 <= step <= total_steps:
        raise ConfigError(f"step {step} outside [0, {total_steps}]")
    warmup = cfg.warmup_fraction * total_steps
    if step < warmup:
        return cfg.lr_peak * step / warmup
    progress = (step - warmup) / (total_steps - warmup)
    return cfg.lr_peak * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, torch.Tensor] = field(default_factory=dict)
    v: dict[str, torch.Tensor] = field(default_factory=dict)


def _decays(name: str) -> bool:
    return not name.startswith("loss.")


@torch.no_grad()
def adamw_step(params: dict[str, torch.Tensor], grads: dict[str, torch.Tensor | None], mask: TrainableMask,
               state: AdamState, lr: float, cfg: TrainConfig) -> AdamState:
    """One decoupled-weight-decay Adam update, in place, on trainable tensors only.

    Missing gradients on trainable tensors count as zero. Loss parameters
    are exempt from weight decay.
    """
    live = [n for n in params if mask.get(n, False)]
    for name in live:
        g = grads.get(name)
        if g is not None and not bool(torch.isfinite(g).all()):
            raise NumericError(f"non-finite gradient for {name}; step rejected")
    b1, b2 = cfg.betas
    state.step += 1
    t = state.step
    for name in live:
        p = params[name]
        g = grads.get(name)
        if g is None:
            g = torch.zeros_like(p)
        m = state.m.setdefault(name, torch.zeros_like(p))
        v = state.v.setdefault(name, torch.zeros_like(p))
        m.mul_(b1).add_(g, alpha=1 - b1)
        v.mul_(b2).addcmul_(g, g, value=1 - b2)
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        if cfg.weight_decay and _decays(name):
            p.mul_(1 - lr * cfg.weight_decay)
        p.sub_(lr * m_hat / (v_hat.sqrt() + cfg.adam_eps))
    return state


def gather_and_loss(shards: Sequence[tuple[torch.Tensor, torch.Tensor]], kind: str, params,
                    dims=None, renormalize: bool = False) -> torch.Tensor:
    """Concatenate per-worker embedding shards, then evaluate the loss on the full batch."""
    if not shards:
        raise DimensionError("no shards to gather")
    widths = {s.shape[-1] for pair in shards for s in pair}
    if len(widths) != 1:
        raise DimensionError(f"shard embedding widths differ: {sorted(widths)}")
    ua = torch.cat([a for a, _ in shards], dim=0)
    ut = torch.cat([t for _, t in shards], dim=0)
    return contrastive_objective(ua, ut, params, kind, dims, renormalize)


def split_shards(ua: torch.Tensor, ut: torch.Tensor, workers: int):
    return list(zip(torch.chunk(ua, workers), torch.chunk(ut, workers)))


@dataclass
class PairedSet:
    """Audio features (``N x F x T``) and their caption token lists."""

    features: np.ndarray
    captions: list[list[int]]

    def __post_init__(self):
        if len(self.features) != len(self.captions):
            raise DimensionError("features and captions differ in length")

    def __len__(self):
        return len(self.captions)

    def subset(self, idx) -> "PairedSet":
        idx = np.asarray(idx, dtype=np.int64)
        return PairedSet(self.features[idx], [self.captions[i] for i in idx])


@dataclass
class Checkpoint:
    config: dict
    tensors: dict[str, torch.Tensor]
    optim: AdamState
    config_hash: str = ""

    def __post_init__(self):
        if not self.config_hash:
            self.config_hash = config_hash(self.config)

    @property
    def model_config(self) -> ModelConfig:
        return split_flat(self.config)[0]

    @property
    def train_config(self) -> TrainConfig:
        return split_flat(self.config)[1]


def model_from_checkpoint(ckpt: Checkpoint) -> DualEncoder:
    model_cfg, train_cfg = split_flat(ckpt.config)
    model = DualEncoder(model_cfg, train_cfg.text_style, train_cfg.loss)
    if any(n.endswith("lora_A") for n in ckpt.tensors):
        towers = {n.split(".", 1)[0] for n in ckpt.tensors if n.endswith("lora_A")}
        for tower in sorted(towers):
            apply_lora(getattr(model, tower), train_cfg.lora_rank, train_cfg.effective_lora_alpha)
    state = dict(model.named_parameters())
    missing = set(state) - set(ckpt.tensors)
    if missing:
        raise FormatError(f"checkpoint lacks tensors: {sorted(missing)[:5]}")
    with torch.no_grad():
        for name, p in state.items():
            p.copy_(ckpt.tensors[name])
    return model


def snapshot(model: DualEncoder, model_cfg: ModelConfig, train_cfg: TrainConfig, optim: AdamState) -> Checkpoint:
    tensors = {n: p.detach().clone() for n, p in model.named_parameters()}
    optim_copy = AdamState(optim.step, {k: v.clone() for k, v in optim.m.items()},
                           {k: v.clone() for k, v in optim.v.items()})
    return Checkpoint(to_flat(model_cfg, train_cfg), tensors, optim_copy)


# -- checkpoint file -------------------------------------------------------

def _write_tensor(fh, name: str, t: torch.Tensor) -> None:
    raw = name.encode("utf-8")
    fh.write(struct.pack("<H", len(raw)))
    fh.write(raw)
    fh.write(struct.pack("<B", t.dim()))
    fh.write(struct.pack(f"<{t.dim()}I", *t.shape))
    fh.write(np.ascontiguousarray(t.detach().numpy(), dtype="<f8").tobytes())


def _read_exact(fh, n: int) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise FormatError("truncated file")
    return data


def _read_tensor(fh) -> tuple[str, torch.Tensor]:
    (nlen,) = struct.unpack("<H", _read_exact(fh, 2))
    name = _read_exact(fh, nlen).decode("utf-8")
    (ndim,) = struct.unpack("<B", _read_exact(fh, 1))
    shape = struct.unpack(f"<{ndim}I", _read_exact(fh, 4 * ndim))
    count = int(np.prod(shape)) if ndim else 1
    arr = np.frombuffer(_read_exact(fh, 8 * count), dtype="<f8").reshape(shape)
    return name, torch.tensor(arr.astype(np.float64), dtype=dc.DTYPE)


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    """Layout: ``WLCK``, u16 version, 32-byte config sha256, u32-length config
    JSON, u64 optimizer step, u32 tensor count, then named tensors
    (u16 name length, name, u8 ndim, u32 dims, little-endian f64 data).
    Optimizer moments are stored as ``optim.m.<name>`` / ``optim.v.<name>``."""
    entries = list(ckpt.tensors.items())
    entries += [(f"optim.m.{k}", v) for k, v in sorted(ckpt.optim.m.items())]
    entries += [(f"optim.v.{k}", v) for k, v in sorted(ckpt.optim.v.items())]
    cfg_blob = json.dumps(ckpt.config, sort_keys=True).encode("utf-8")
    try:
        with open(path, "wb") as fh:
            fh.write(CKPT_MAGIC)
            fh.write(struct.pack("<H", CKPT_VERSION))
            fh.write(bytes.fromhex(ckpt.config_hash))
            fh.write(struct.pack("<I", len(cfg_blob)))
            fh.write(cfg_blob)
            fh.write(struct.pack("<Q", ckpt.optim.step))
            fh.write(struct.pack("<I", len(entries)))
            for name, t in entries:
                _write_tensor(fh, name, t)
    except OSError as exc:
        raise FormatError(f"cannot write checkpoint {path}: {exc}") from exc


def load_checkpoint(path: str | Path) -> Checkpoint:
    try:
        fh = open(path, "rb")
    except OSError as exc:
        raise FormatError(f"cannot read checkpoint {path}: {exc}") from exc
    with fh:
        if _read_exact(fh, 4) != CKPT_MAGIC:
            raise FormatError(f"{path}: not a WLCK checkpoint")
        (version,) = struct.unpack("<H", _read_exact(fh, 2))
        if version != CKPT_VERSION:
            raise FormatError(f"{path}: unsupported checkpoint version {version}")
        digest = _read_exact(fh, 32).hex()
        (clen,) = struct.unpack("<I", _read_exact(fh, 4))
        config = json.loads(_read_exact(fh, clen).decode("utf-8"))
        (step,) = struct.unpack("<Q", _read_exact(fh, 8))
        (count,) = struct.unpack("<I", _read_exact(fh, 4))
        tensors, optim = {}, AdamState(step)
        for _ in range(count):
            name, t = _read_tensor(fh)
            if name.startswith("optim.m."):
                optim.m[name[8:]] = t
            elif name.startswith("optim.v."):
                optim.v[name[8:]] = t
            else:
                tensors[name] = t
    if config_hash(config) != digest:
        raise FormatError(f"{path}: config hash mismatch")
    return Checkpoint(config, tensors, optim, digest)


# -- training loop ---------------------------------------------------------

@dataclass
class TrainResult:
    checkpoint: Checkpoint
    model: DualEncoder
    step_log: list[dict] = field(default_factory=list)
    epoch_log: list[dict] = field(default_factory=list)


def validation_split(n: int, fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    perm = SplitMix64(seed, "val-split").permutation(n)
    n_val = int(round(fraction * n))
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


@torch.no_grad()
def embed_pairs(model: DualEncoder, data: PairedSet, batch_size: int = 256) -> tuple[np.ndarray, np.ndarray]:
    ua, ut = [], []
    for s in range(0, len(data), batch_size):
        feats = torch.as_tensor(data.features[s : s + batch_size], dtype=dc.DTYPE)
        ua.append(model.embed_audio(feats).numpy())
        ut.append(model.embed_text(model.prepare(data.captions[s : s + batch_size])).numpy())
    return np.concatenate(ua), np.concatenate(ut)


def train(model_cfg: ModelConfig, cfg: TrainConfig, data: PairedSet, *, resume: Checkpoint | None = None,
          on_epoch: Callable[[dict], None] | None = None) -> TrainResult:
    """Train a dual encoder on ``data``; deterministic given ``cfg.seed``."""
    from .evaluation import pairwise_recall  # local import keeps module layering one-way

    if len(data) == 0:
        raise ConfigError("empty training set")
    if resume is not None:
        model = model_from_checkpoint(resume)
        if cfg.regime == "lora" and not any(n.endswith("lora_A") for n, _ in model.named_parameters()):
            apply_lora(model.audio, cfg.lora_rank, cfg.effective_lora_alpha, cfg.seed)
            if cfg.scope == "both":
                apply_lora(model.text, cfg.lora_rank, cfg.effective_lora_alpha, cfg.seed + 1)
        mask = build_mask(cfg.regime, cfg.scope, model, cfg.loss)
        for name, p in model.named_parameters():
            p.requires_grad_(mask[name])
        optim = AdamState(resume.optim.step, {k: v.clone() for k, v in resume.optim.m.items()},
                          {k: v.clone() for k, v in resume.optim.v.items()})
    else:
        model = build_model(model_cfg, cfg.text_style, cfg.loss, cfg.seed)
        mask = prepare_adaptation(model, cfg.regime, cfg.scope, cfg.loss, cfg.lora_rank,
                                  cfg.effective_lora_alpha, cfg.seed)
        optim = AdamState()

    train_idx, val_idx = validation_split(len(data), cfg.val_fraction, cfg.seed)
    train_set = data.subset(train_idx)
    val_set = data.subset(val_idx) if len(val_idx) else None
    bs = min(cfg.batch_size, len(train_set))
    bs -= bs % cfg.simulated_workers
    if bs < 1:
        raise ConfigError("training set smaller than the simulated worker count")
    steps_per_epoch = len(train_set) // bs
    total = steps_per_epoch * cfg.epochs
    dims = model_cfg.matryoshka_dims if cfg.matryoshka else None
    params = dict(model.named_parameters())
    trainable = [n for n in params if mask[n]]
    result = TrainResult(None, model)  # type: ignore[arg-type]

    step = 0
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        order = SplitMix64(cfg.seed, f"shuffle-{epoch}").permutation(len(train_set))
        losses = []
        model.train()
        for b in range(steps_per_epoch):
            idx = order[b * bs : (b + 1) * bs]
            batch = train_set.subset(idx)
            lr = cosine_warmup_lr(step, total, cfg)
            step += 1
            try:
                ua = model.embed_audio(torch.as_tensor(batch.features, dtype=dc.DTYPE))
                ut = model.embed_text(model.prepare(batch.captions))
            except DegenerateEmbeddingError as exc:
                log.warning("step %d aborted: %s", step, exc)
                result.step_log.append({"step": step, "epoch": epoch, "loss": None, "lr": lr, "error": str(exc)})
                continue
            loss = gather_and_loss(split_shards(ua, ut, cfg.simulated_workers), cfg.loss, model.loss,
                                   dims, cfg.renormalize_slices)
            grads = torch.autograd.grad(loss, [params[n] for n in trainable], allow_unused=True)
            grads = dict(zip(trainable, grads))
            if cfg.grad_clip:
                norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values() if g is not None))
                if norm > cfg.grad_clip:
                    grads = {n: None if g is None else g * (cfg.grad_clip / norm) for n, g in grads.items()}
            adamw_step(params, grads, mask, optim, lr, cfg)
            value = float(loss.detach())
            losses.append(value)
            result.step_log.append({"step": step, "epoch": epoch, "loss": value, "lr": lr})
        entry = {"epoch": epoch + 1, "mean_loss": float(np.mean(losses)) if losses else None,
                 "seconds": time.perf_counter() - t0}
        if val_set is not None:
            model.eval()
            va, vt = embed_pairs(model, val_set)
            entry["val_r1_t2a"] = pairwise_recall(va, vt, "t2a", 1)
            entry["val_r1_a2t"] = pairwise_recall(va, vt, "a2t", 1)
        result.epoch_log.append(entry)
        log.info("epoch %s", entry)
        if on_epoch:
            on_epoch(entry)
    result.checkpoint = snapshot(model, model_cfg, cfg, optim)
    return result
