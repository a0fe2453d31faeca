"""Differentiable numeric primitives on float64 torch tensors.

Reverse-mode gradients come from torch autograd; this module adds the
shape/index contracts the rest of the package relies on and a
finite-difference gradient checker.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .errors import DimensionError, NumericError, TokenIndexError

DTYPE = torch.float64
LAYERNORM_EPS = 1e-5

Tensor = torch.Tensor


def tensor(data, requires_grad: bool = False) -> Tensor:
    return torch.tensor(np.asarray(data, dtype=np.float64), dtype=DTYPE, requires_grad=requires_grad)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.dim() < 1 or b.dim() < 1 or a.shape[-1] != b.shape[-2 if b.dim() > 1 else 0]:
        raise DimensionError(f"matmul inner extents differ: {tuple(a.shape)} @ {tuple(b.shape)}")
    return a @ b


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` with ``weight`` stored out x in."""
    if x.shape[-1] != weight.shape[-1]:
        raise DimensionError(f"linear input {tuple(x.shape)} vs weight {tuple(weight.shape)}")
    return F.linear(x, weight, bias)


def gelu(x: Tensor) -> Tensor:
    # exact erf form; the tanh approximation spoils tight finite-difference checks
    return 0.5 * x * (1.0 + torch.erf(x / math.sqrt(2.0)))


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = LAYERNORM_EPS) -> Tensor:
    if eps <= 0:
        raise ValueError("eps must be > 0")
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(
            f"layernorm width {d} vs gamma {tuple(gamma.shape)} / beta {tuple(beta.shape)}"
        )
    mean = x.mean(dim=-1, keepdim=True)
    centered = x - mean
    var = (centered * centered).mean(dim=-1, keepdim=True)
    return centered / torch.sqrt(var + eps) * gamma + beta


def softmax(x: Tensor, dim: int = -1) -> Tensor:
    return torch.softmax(x, dim=dim)


def log_softmax(x: Tensor, dim: int = -1) -> Tensor:
    shifted = x - x.max(dim=dim, keepdim=True).values.detach()
    return shifted - torch.logsumexp(shifted, dim=dim, keepdim=True)


def softmax_cross_entropy(logits: Tensor, target_index) -> Tensor:
    """Mean over rows of ``-log softmax(logits)[target]``."""
    if logits.dim() != 2:
        raise DimensionError(f"logits must be B x C, got {tuple(logits.shape)}")
    target = torch.as_tensor(target_index, dtype=torch.long)
    b, c = logits.shape
    if target.shape != (b,):
        raise DimensionError(f"need one target per row ({b}), got {tuple(target.shape)}")
    if b and (int(target.min()) < 0 or int(target.max()) >= c):
        raise TokenIndexError(f"target index out of range [0, {c})")
    logp = log_softmax(logits, dim=-1)
    return -logp.gather(1, target[:, None]).mean()


def softplus(x: Tensor) -> Tensor:
    """``log(1 + exp(x))`` without overflow."""
    return torch.clamp(x, min=0) + torch.log1p(torch.exp(-torch.abs(x)))


@dataclass(frozen=True)
class GradCheckReport:
    op_name: str
    max_relative_error: float
    tolerance: float
    passed: bool


def grad_check(
    op: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    tolerance: float = 1e-6,
    *,
    op_name: str = "op",
    max_coords: int | None = None,
    seed: int = 0,
) -> GradCheckReport:
    """Compare autograd gradients of ``op`` against central differences.

    Non-scalar outputs are reduced to a scalar by a fixed random projection.
    The relative error is ``max|analytic - numeric| / max(max|analytic|, max|numeric|)``
    over all checked coordinates. ``max_coords`` samples that many
    coordinates per input (seeded) instead of perturbing every entry.
    """
    leaves = [x.detach().clone().to(DTYPE).requires_grad_(True) for x in inputs]
    gen = torch.Generator().manual_seed(seed)
    projection: list[Tensor | None] = [None]

    def scalar(*xs):
        out = op(*xs)
        if out.numel() == 1:
            return out.reshape(())
        if projection[0] is None:
            projection[0] = torch.randn(out.shape, generator=gen, dtype=DTYPE)
        return (out * projection[0]).sum()

    value = scalar(*leaves)
    analytic = torch.autograd.grad(value, leaves, allow_unused=True)
    analytic = [torch.zeros_like(x) if g is None else g for x, g in zip(leaves, analytic)]
    for x, g in zip(leaves, analytic):
        if not torch.isfinite(g).all():
            raise NumericError(f"{op_name}: non-finite analytic gradient")

    a_parts, n_parts = [], []
    with torch.no_grad():
        for i, x in enumerate(leaves):
            flat = x.view(-1)
            n = flat.numel()
            if max_coords is not None and n > max_coords:
                coords = torch.randperm(n, generator=gen)[:max_coords].sort().values.tolist()
            else:
                coords = range(n)
            for j in coords:
                orig = float(flat[j])
                h = 1e-6 * max(1.0, abs(orig))
                flat[j] = orig + h
                plus = float(scalar(*leaves))
                flat[j] = orig - h
                minus = float(scalar(*leaves))
                flat[j] = orig
                n_parts.append((plus - minus) / (2 * h))
                a_parts.append(float(analytic[i].view(-1)[j]))
    a = np.asarray(a_parts)
    num = np.asarray(n_parts)
    scale = max(np.abs(a).max(initial=0.0), np.abs(num).max(initial=0.0))
    diff = np.abs(a - num).max(initial=0.0)
    err = 0.0 if diff == 0.0 else diff / max(scale, 1e-300)
    return GradCheckReport(op_name, float(err), float(tolerance), bool(err <= tolerance))
