"""Audio and text towers, projectors and l2 normalization.

The audio tower runs a two-layer convolutional front-end over the feature
matrix, adds sinusoidal positions, appends a learnable global token as the
final sequence element and reads the pooled representation from that last
position. The text tower pools at EOS (causal, CLIP-like) or at a prepended
CLS (bidirectional, BERT-like).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from . import diffcore as dc
from .config import ModelConfig
from .errors import ConfigError, DegenerateEmbeddingError, DimensionError, TokenIndexError, ValidationError
from .rng import SplitMix64

PAD, CLS, EOS, SEP = 0, 1, 2, 3
FIRST_CONTENT_ID = 4
INIT_STD = 0.02


@dataclass(frozen=True)
class FeatureSequence:
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2:
            raise ValidationError(f"features must be F x T, got shape {values.shape}")
        if values.shape[1] < 2:
            raise ValidationError("the conv front-end needs at least 2 frames")
        if not np.isfinite(values).all():
            raise ValidationError("features contain non-finite values")
        object.__setattr__(self, "values", values)

    @property
    def bins(self) -> int:
        return self.values.shape[0]

    @property
    def frames(self) -> int:
        return self.values.shape[1]


class Linear(nn.Module):
    """Linear map with an optional low-rank adapter (``W + (alpha/r) B A``)."""

    def __init__(self, d_in: int, d_out: int, bias: bool = True):
        super().__init__()
        self.weight = nn.Parameter(torch.zeros(d_out, d_in, dtype=dc.DTYPE))
        self.bias = nn.Parameter(torch.zeros(d_out, dtype=dc.DTYPE)) if bias else None
        self.lora_A = None
        self.lora_B = None
        self.lora_scale = 0.0

    def add_lora(self, rank: int, alpha: float, a_init: np.ndarray) -> None:
        d_out, d_in = self.weight.shape
        if not 1 <= rank <= min(d_in, d_out):
            raise ConfigError(f"LoRA rank {rank} outside [1, {min(d_in, d_out)}] for a {d_out}x{d_in} target")
        self.lora_A = nn.Parameter(torch.tensor(a_init.reshape(rank, d_in), dtype=dc.DTYPE))
        self.lora_B = nn.Parameter(torch.zeros(d_out, rank, dtype=dc.DTYPE))
        self.lora_scale = alpha / rank

    def forward(self, x):
        out = dc.linear(x, self.weight, self.bias)
        if self.lora_A is not None:
            out = out + self.lora_scale * dc.linear(dc.linear(x, self.lora_A), self.lora_B)
        return out


class LayerNorm(nn.Module):
    def __init__(self, d: int):
        super().__init__()
        self.gamma = nn.Parameter(torch.ones(d, dtype=dc.DTYPE))
        self.beta = nn.Parameter(torch.zeros(d, dtype=dc.DTYPE))

    def forward(self, x):
        return dc.layernorm(x, self.gamma, self.beta)


class Attention(nn.Module):
    def __init__(self, d: int, heads: int):
        super().__init__()
        self.heads = heads
        self.q = Linear(d, d)
        self.k = Linear(d, d, bias=False)  # a key bias only shifts logits uniformly
        self.v = Linear(d, d)
        self.o = Linear(d, d)

    def forward(self, x, key_valid=None, causal: bool = False):
        b, n, d = x.shape
        hd = d // self.heads

        def split(t):
            return t.view(b, n, self.heads, hd).transpose(1, 2)

        q, k, v = split(self.q(x)), split(self.k(x)), split(self.v(x))
        scores = q @ k.transpose(-1, -2) / math.sqrt(hd)
        blocked = torch.zeros(b, 1, n, n, dtype=torch.bool)
        if key_valid is not None:
            blocked = blocked | ~key_valid[:, None, None, :]
        if causal:
            blocked = blocked | torch.ones(n, n, dtype=torch.bool).triu(1)
        scores = scores.masked_fill(blocked, float("-inf"))
        attn = dc.softmax(scores, dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, n, d)
        return self.o(out)


class Block(nn.Module):
    """Pre-norm transformer block."""

    def __init__(self, d: int, heads: int, ffn_mult: int):
        super().__init__()
        self.ln1 = LayerNorm(d)
        self.attn = Attention(d, heads)
        self.ln2 = LayerNorm(d)
        self.fc1 = Linear(d, ffn_mult * d)
        self.fc2 = Linear(ffn_mult * d, d)

    def forward(self, x, key_valid=None, causal=False):
        x = x + self.attn(self.ln1(x), key_valid, causal)
        return x + self.fc2(dc.gelu(self.fc1(self.ln2(x))))


def sinusoidal_positions(length: int, d: int) -> torch.Tensor:
    """Whisper-style table: first half sines, second half cosines."""
    half = d // 2
    increment = math.log(10000.0) / max(half - 1, 1)
    inv = torch.exp(-increment * torch.arange(half, dtype=dc.DTYPE))
    t = torch.arange(length, dtype=dc.DTYPE)[:, None] * inv[None, :]
    table = torch.cat([torch.sin(t), torch.cos(t)], dim=1)
    if d % 2:
        table = torch.cat([table, torch.zeros(length, 1, dtype=dc.DTYPE)], dim=1)
    return table


class AudioTower(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.d_model
        self.conv1_weight = nn.Parameter(torch.zeros(d, cfg.feat_bins, 3, dtype=dc.DTYPE))
        self.conv1_bias = nn.Parameter(torch.zeros(d, dtype=dc.DTYPE))
        self.conv2_weight = nn.Parameter(torch.zeros(d, d, 3, dtype=dc.DTYPE))
        self.conv2_bias = nn.Parameter(torch.zeros(d, dtype=dc.DTYPE))
        self.global_token = nn.Parameter(torch.zeros(1, d, dtype=dc.DTYPE))
        self.layers = nn.ModuleList(Block(d, cfg.heads, cfg.ffn_mult) for _ in range(cfg.audio_layers))
        self.ln_post = LayerNorm(d)
        self.proj = Linear(d, cfg.proj_dim, bias=False)

    def frontend(self, x: torch.Tensor) -> torch.Tensor:
        """``B x F x T`` features to ``B x ceil(T/2) x D`` hidden states."""
        if x.dim() != 3 or x.shape[1] != self.cfg.feat_bins:
            raise ConfigError(f"expected B x {self.cfg.feat_bins} x T features, got {tuple(x.shape)}")
        if x.shape[2] < 2:
            raise ValidationError("the conv front-end needs at least 2 frames")
        h = dc.gelu(torch.conv1d(x, self.conv1_weight, self.conv1_bias, stride=1, padding=1))
        h = dc.gelu(torch.conv1d(h, self.conv2_weight, self.conv2_bias, stride=2, padding=1))
        return h.transpose(1, 2)

    def hidden(self, x: torch.Tensor) -> torch.Tensor:
        h = self.frontend(x)
        b, t, d = h.shape
        h = h + sinusoidal_positions(t, d)
        # the global token is appended last and gets no positional embedding
        h = torch.cat([h, self.global_token.expand(b, 1, d)], dim=1)
        for layer in self.layers:
            h = layer(h)
        return self.ln_post(h)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.hidden(x)[:, -1, :]


class TextTower(nn.Module):
    def __init__(self, cfg: ModelConfig, style: str = "clip_style"):
        super().__init__()
        if style not in ("clip_style", "bert_style"):
            raise ConfigError(f"unknown text style {style!r}")
        self.cfg = cfg
        self.style = style
        d = cfg.d_model
        self.tok_emb = nn.Parameter(torch.zeros(cfg.vocab_size, d, dtype=dc.DTYPE))
        self.pos_emb = nn.Parameter(torch.zeros(cfg.max_text_len, d, dtype=dc.DTYPE))
        self.layers = nn.ModuleList(Block(d, cfg.heads, cfg.ffn_mult) for _ in range(cfg.text_layers))
        self.ln_post = LayerNorm(d)
        self.proj = Linear(d, cfg.proj_dim, bias=False)

    def forward(self, ids: torch.Tensor) -> torch.Tensor:
        """Pooled features for prepared, padded ``B x L`` token ids."""
        ids = torch.as_tensor(ids, dtype=torch.long)
        if ids.dim() != 2 or ids.shape[1] > self.cfg.max_text_len:
            raise DimensionError(f"token batch must be B x L with L <= {self.cfg.max_text_len}")
        if ids.numel() and (int(ids.min()) < 0 or int(ids.max()) >= self.cfg.vocab_size):
            raise TokenIndexError(f"token id outside [0, {self.cfg.vocab_size})")
        valid = ids != PAD
        h = self.tok_emb[ids] + self.pos_emb[: ids.shape[1]]
        causal = self.style == "clip_style"
        for layer in self.layers:
            h = layer(h, key_valid=valid, causal=causal)
        h = self.ln_post(h)
        return h[torch.arange(ids.shape[0]), pool_positions(ids, self.style)]


def pool_positions(ids: torch.Tensor, style: str) -> torch.Tensor:
    marker = EOS if style == "clip_style" else CLS
    hits = ids == marker
    if not bool(hits.any(dim=1).all()):
        raise ValidationError(f"every sequence needs a {'EOS' if marker == EOS else 'CLS'} marker")
    return hits.double().argmax(dim=1)


def prepare_tokens(ids, style: str, max_len: int) -> np.ndarray:
    """Insert the pooling marker and right-pad with PAD to ``max_len``.

    Content longer than ``max_len - 1`` is truncated from the right.
    """
    content = [int(t) for t in ids if int(t) != PAD]
    content = content[: max_len - 1]
    seq = [CLS] + content if style == "bert_style" else content + [EOS]
    return np.asarray(seq + [PAD] * (max_len - len(seq)), dtype=np.int64)


def prepare_batch(captions, style: str, max_len: int) -> torch.Tensor:
    return torch.as_tensor(np.stack([prepare_tokens(c, style, max_len) for c in captions]))


def project_normalize(z: torch.Tensor, projector: torch.Tensor, tol: float = 1e-12) -> torch.Tensor:
    """Project ``z`` (``... x D``) with a ``d x D`` weight then l2-normalize."""
    u = dc.linear(z, projector)
    norm = torch.linalg.vector_norm(u, dim=-1, keepdim=True)
    if bool((norm <= tol).any()):
        bad = torch.nonzero(norm.reshape(-1) <= tol).reshape(-1).tolist()
        raise DegenerateEmbeddingError(f"zero-norm projection for item(s) {bad}")
    return u / norm


class LossParams(nn.Module):
    """Learnable log-temperature and SigLIP bias."""

    MAX_LOG_TEMPERATURE = math.log(100.0)

    def __init__(self, loss: str = "clip"):
        super().__init__()
        if loss == "siglip":
            log_t, bias = math.log(10.0), -10.0
        else:
            log_t, bias = math.log(1 / 0.07), 0.0
        self.log_temperature = nn.Parameter(torch.tensor(log_t, dtype=dc.DTYPE))
        self.siglip_bias = nn.Parameter(torch.tensor(bias, dtype=dc.DTYPE))

    @property
    def temperature(self) -> torch.Tensor:
        return torch.exp(torch.clamp(self.log_temperature, max=self.MAX_LOG_TEMPERATURE))


class DualEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig, text_style: str = "clip_style", loss: str = "clip"):
        super().__init__()
        self.cfg = cfg
        self.audio = AudioTower(cfg)
        self.text = TextTower(cfg, text_style)
        self.loss = LossParams(loss)

    @property
    def text_style(self) -> str:
        return self.text.style

    def embed_audio(self, feats: torch.Tensor) -> torch.Tensor:
        return project_normalize(self.audio(feats), self.audio.proj.weight)

    def embed_text(self, ids: torch.Tensor) -> torch.Tensor:
        return project_normalize(self.text(ids), self.text.proj.weight)

    def prepare(self, captions) -> torch.Tensor:
        return prepare_batch(captions, self.text_style, self.cfg.max_text_len)


def init_weights(module: nn.Module, seed: int, stream: str = "init") -> None:
    """Normal(0, 0.02) for weight-like tensors, zeros for biases/LoRA B, ones for LN gains.

    Conv front-end weights use Normal(0, 1/sqrt(fan_in)).

    Draws come from a SplitMix64 stream in ``named_parameters`` order.
    """
    rng = SplitMix64(seed, stream)
    with torch.no_grad():
        for name, p in module.named_parameters():
            leaf = name.rsplit(".", 1)[-1]
            if leaf == "gamma":
                p.fill_(1.0)
            elif leaf in ("beta", "bias", "conv1_bias", "conv2_bias", "lora_B"):
                p.zero_()
            elif leaf in ("log_temperature", "siglip_bias"):
                continue
            elif leaf in ("conv1_weight", "conv2_weight"):
                # fan-in scale; at 0.02 the front-end output drowns under the unit-scale positions
                fan_in = p.shape[1] * p.shape[2]
                p.copy_(torch.tensor(rng.normal(tuple(p.shape), 1.0 / math.sqrt(fan_in)), dtype=dc.DTYPE))
            else:
                p.copy_(torch.tensor(rng.normal(tuple(p.shape), INIT_STD), dtype=dc.DTYPE))


def build_model(cfg: ModelConfig, text_style: str = "clip_style", loss: str = "clip", seed: int = 0) -> DualEncoder:
    model = DualEncoder(cfg, text_style, loss)
    init_weights(model, seed)
    return model
