"""Adaptation regimes and update scopes as trainability masks."""

from __future__ import annotations

from torch import nn

from .config import REGIMES, SCOPES
from .errors import ConfigError
from .rng import SplitMix64
from .towers import INIT_STD, Attention, DualEncoder, Linear

TrainableMask = dict[str, bool]

LORA_TARGETS = ("q", "k", "v", "o")


def apply_lora(tower: nn.Module, rank: int, alpha: float | None = None, seed: int = 0) -> int:
    """Attach adapters to every attention q/k/v/o projection of ``tower``.

    ``A ~ Normal(0, 0.02)``, ``B = 0``, so outputs are unchanged at creation.
    Returns the number of parameters added.
    """
    alpha = float(rank if alpha is None else alpha)
    rng = SplitMix64(seed, "lora")
    added = 0
    for module in tower.modules():
        if not isinstance(module, Attention):
            continue
        for target in LORA_TARGETS:
            lin: Linear = getattr(module, target)
            d_out, d_in = lin.weight.shape
            if not 1 <= rank <= min(d_in, d_out):
                raise ConfigError(f"LoRA rank {rank} too large for a {d_out}x{d_in} projection")
            lin.add_lora(rank, alpha, rng.normal((rank, d_in), INIT_STD))
            added += rank * (d_in + d_out)
    return added


def _tower_of(name: str) -> str:
    return name.split(".", 1)[0]


def build_mask(regime: str, scope: str, model: DualEncoder, loss: str = "clip") -> TrainableMask:
    """Per-tensor trainability for one (regime, scope) point.

    The global token and the loss temperature train under every regime; the
    SigLIP bias trains only when the SigLIP loss is in use. Under
    ``audio_only`` the whole text tower, projector included, is frozen.
    """
    if regime not in REGIMES:
        raise ConfigError(f"unknown regime {regime!r}")
    if scope not in SCOPES:
        raise ConfigError(f"unknown scope {scope!r}")
    towers = {"audio"} if scope == "audio_only" else {"audio", "text"}
    mask: TrainableMask = {}
    for name, _ in model.named_parameters():
        tower = _tower_of(name)
        leaf = name.rsplit(".", 1)[-1]
        if tower == "loss":
            mask[name] = leaf == "log_temperature" or (leaf == "siglip_bias" and loss == "siglip")
        elif name == "audio.global_token":
            mask[name] = True
        elif tower not in towers:
            mask[name] = False
        elif regime == "full":
            mask[name] = True
        elif name.startswith(f"{tower}.proj."):
            mask[name] = True
        elif regime == "lora":
            mask[name] = leaf in ("lora_A", "lora_B")
        else:
            mask[name] = False
    return mask


def prepare_adaptation(model: DualEncoder, regime: str, scope: str, loss: str, rank: int = 8,
                       alpha: float | None = None, seed: int = 0) -> TrainableMask:
    """Attach LoRA where the regime calls for it and return the mask."""
    if regime == "lora":
        apply_lora(model.audio, rank, alpha, seed)
        if scope == "both":
            apply_lora(model.text, rank, alpha, seed + 1)
    mask = build_mask(regime, scope, model, loss)
    for name, p in model.named_parameters():
        p.requires_grad_(mask[name])
    return mask
