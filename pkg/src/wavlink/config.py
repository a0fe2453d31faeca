"""Configuration dataclasses and the flat-JSON config loader."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .errors import ConfigError

REGIMES = ("projector_only", "lora", "full")
SCOPES = ("audio_only", "both")
LOSSES = ("clip", "siglip")
TEXT_STYLES = ("clip_style", "bert_style")


@dataclass(frozen=True)
class ModelConfig:
    feat_bins: int = 8
    d_model: int = 64
    audio_layers: int = 2
    text_layers: int = 2
    heads: int = 4
    ffn_mult: int = 4
    vocab_size: int = 256
    max_text_len: int = 32
    proj_dim: int = 64
    matryoshka_dims: tuple[int, ...] = (64, 32, 16, 8)

    def __post_init__(self):
        object.__setattr__(self, "matryoshka_dims", tuple(int(d) for d in self.matryoshka_dims))
        if self.d_model % self.heads:
            raise ConfigError(f"d_model={self.d_model} not divisible by heads={self.heads}")
        validate_ladder(self.matryoshka_dims, self.proj_dim)
        if self.vocab_size <= 4:
            raise ConfigError("vocab_size must leave room beyond the 4 special tokens")
        if self.max_text_len < 2:
            raise ConfigError("max_text_len must be >= 2")


def validate_ladder(dims, proj_dim: int) -> None:
    dims = list(dims)
    if not dims:
        raise ConfigError("matryoshka ladder is empty")
    if dims[0] != proj_dim:
        raise ConfigError(f"ladder must start at proj_dim={proj_dim}, got {dims}")
    for hi, lo in zip(dims, dims[1:]):
        if lo >= hi:
            raise ConfigError(f"ladder must be strictly descending: {dims}")
        if hi % lo:
            raise ConfigError(f"ladder entry {lo} does not divide {hi}")
    if dims[-1] < 1:
        raise ConfigError(f"ladder entries must be positive: {dims}")


@dataclass(frozen=True)
class TrainConfig:
    lr_peak: float = 1e-4
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    batch_size: int = 32
    epochs: int = 10
    warmup_fraction: float = 0.05
    seed: int = 0
    regime: str = "full"
    scope: str = "both"
    loss: str = "clip"
    text_style: str = "clip_style"
    matryoshka: bool = True
    renormalize_slices: bool = False
    simulated_workers: int = 1
    lora_rank: int = 8
    lora_alpha: float | None = None
    grad_clip: float | None = None
    val_fraction: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))
        if not 0.0 < self.warmup_fraction < 1.0:
            raise ConfigError(f"warmup_fraction must lie in (0, 1), got {self.warmup_fraction}")
        if self.simulated_workers < 1 or self.batch_size % self.simulated_workers:
            raise ConfigError(
                f"batch_size={self.batch_size} must be divisible by simulated_workers={self.simulated_workers}"
            )
        if self.regime not in REGIMES:
            raise ConfigError(f"unknown regime {self.regime!r}; expected one of {REGIMES}")
        if self.scope not in SCOPES:
            raise ConfigError(f"unknown scope {self.scope!r}; expected one of {SCOPES}")
        if self.loss not in LOSSES:
            raise ConfigError(f"unknown loss {self.loss!r}; expected one of {LOSSES}")
        if self.text_style not in TEXT_STYLES:
            raise ConfigError(f"unknown text_style {self.text_style!r}; expected one of {TEXT_STYLES}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")

    @property
    def effective_lora_alpha(self) -> float:
        return float(self.lora_rank if self.lora_alpha is None else self.lora_alpha)


@dataclass(frozen=True)
class SyntheticDatasetSpec:
    num_classes: int = 32
    pairs_per_class: int = 64
    feat_bins: int = 8
    frames: int = 32
    noise_scale: float = 0.3
    tokens_per_caption: int = 4
    distractor_rate: float = 0.2
    seed: int = 7
    num_attributes: int = 8
    attribute_scale: float = 1.0
    vocab_size: int = 256
    pool_size: int = 256
    eval_items_per_class: int = 4
    mcq_choices: int = 4

    def __post_init__(self):
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if self.noise_scale < 0:
            raise ConfigError("noise_scale must be >= 0")
        if not 0.0 <= self.distractor_rate <= 1.0:
            raise ConfigError("distractor_rate must lie in [0, 1]")
        if self.frames < 2:
            raise ConfigError(f"frames={self.frames} too small for the conv front-end (need >= 2)")
        if self.num_attributes < 1:
            raise ConfigError("num_attributes must be >= 1")
        if self.mcq_choices < 2 or self.mcq_choices > self.num_classes:
            raise ConfigError("mcq_choices must lie in [2, num_classes]")


def _coerce(cls, values: dict[str, Any]):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(values) - names
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    try:
        return cls(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def seed_override(default: int) -> int:
    env = os.environ.get("WAVLINK_SEED")
    if env is None or env == "":
        return default
    try:
        return int(env)
    except ValueError as exc:
        raise ConfigError(f"WAVLINK_SEED must be an integer, got {env!r}") from exc


def split_flat(values: dict[str, Any]) -> tuple[ModelConfig, TrainConfig]:
    """Split one flat key namespace into model and training configs.

    Unknown keys raise ``ConfigError``.
    """
    model_keys = {f.name for f in dataclasses.fields(ModelConfig)}
    train_keys = {f.name for f in dataclasses.fields(TrainConfig)}
    unknown = set(values) - model_keys - train_keys
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    model = _coerce(ModelConfig, {k: v for k, v in values.items() if k in model_keys})
    train_vals = {k: v for k, v in values.items() if k in train_keys}
    train_vals["seed"] = seed_override(train_vals.get("seed", TrainConfig.seed))
    return model, _coerce(TrainConfig, train_vals)


def load_run_config(path: str | Path) -> tuple[ModelConfig, TrainConfig]:
    values = _read_json(path)
    return split_flat(values)


def load_dataset_spec(path: str | Path) -> SyntheticDatasetSpec:
    values = _read_json(path)
    spec = _coerce(SyntheticDatasetSpec, values)
    seed = seed_override(spec.seed)
    return dataclasses.replace(spec, seed=seed) if seed != spec.seed else spec


def _read_json(path) -> dict[str, Any]:
    try:
        values = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(values, dict):
        raise ConfigError(f"{path}: expected a JSON object")
    return values


def to_flat(model: ModelConfig, train: TrainConfig) -> dict[str, Any]:
    out = dataclasses.asdict(model)
    out.update(dataclasses.asdict(train))
    return {k: list(v) if isinstance(v, tuple) else v for k, v in out.items()}


def config_hash(values: dict[str, Any]) -> str:
    blob = json.dumps(values, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()
