"""Contrastive objectives: symmetric InfoNCE, pairwise sigmoid, Matryoshka wrapper."""

from __future__ import annotations

import torch

from . import diffcore as dc
from .config import validate_ladder
from .errors import ConfigError, DimensionError


def _check_pair(ua: torch.Tensor, ut: torch.Tensor) -> None:
    if ua.dim() != 2 or ut.dim() != 2:
        raise DimensionError(f"embeddings must be B x d, got {tuple(ua.shape)} and {tuple(ut.shape)}")
    if ua.shape != ut.shape:
        raise DimensionError(f"audio batch {tuple(ua.shape)} vs text batch {tuple(ut.shape)}")
    if ua.shape[0] < 1:
        raise DimensionError("empty batch")


def clip_loss(ua, ut, log_temperature, max_log_temperature: float = 4.605170185988092):
    """Mean of audio->text and text->audio cross-entropy on ``tau * ua @ ut.T``."""
    _check_pair(ua, ut)
    tau = torch.exp(torch.clamp(log_temperature, max=max_log_temperature))
    logits = tau * dc.matmul(ua, ut.T)
    target = torch.arange(ua.shape[0])
    return 0.5 * (dc.softmax_cross_entropy(logits, target) + dc.softmax_cross_entropy(logits.T, target))


def siglip_loss(ua, ut, log_temperature, bias, max_log_temperature: float = 4.605170185988092):
    """Pairwise logistic loss, diagonal positive, summed over pairs and divided by B."""
    _check_pair(ua, ut)
    tau = torch.exp(torch.clamp(log_temperature, max=max_log_temperature))
    z = tau * dc.matmul(ua, ut.T) + bias
    b = ua.shape[0]
    labels = 2.0 * torch.eye(b, dtype=z.dtype) - 1.0
    return dc.softplus(-labels * z).sum() / b


def base_loss(kind: str, ua, ut, params):
    if kind == "clip":
        return clip_loss(ua, ut, params.log_temperature)
    if kind == "siglip":
        return siglip_loss(ua, ut, params.log_temperature, params.siglip_bias)
    raise ConfigError(f"unknown loss {kind!r}")


def slice_level(u: torch.Tensor, d: int, renormalize: bool = False) -> torch.Tensor:
    """First ``d`` channels; optionally rescaled back to unit norm."""
    s = u[..., :d]
    if renormalize:
        s = s / torch.linalg.vector_norm(s, dim=-1, keepdim=True)
    return s


def matryoshka_loss(ua, ut, dims, kind: str, params, renormalize: bool = False):
    """Mean of the base loss over prefix slices ``dims`` of normalized embeddings."""
    _check_pair(ua, ut)
    dims = list(dims)
    validate_ladder(dims, ua.shape[1])
    if len(dims) == 1:
        return base_loss(kind, ua, ut, params)
    total = None
    for d in dims:
        term = base_loss(kind, slice_level(ua, d, renormalize), slice_level(ut, d, renormalize), params)
        total = term if total is None else total + term
    return total / len(dims)


def contrastive_objective(ua, ut, params, kind: str, dims=None, renormalize: bool = False):
    if dims is None:
        return base_loss(kind, ua, ut, params)
    return matryoshka_loss(ua, ut, dims, kind, params, renormalize)
