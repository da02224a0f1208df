"""Conformer encoder stack with optional clipped relative-position attention bias."""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn
import torch.nn.functional as F


class ConformerError(RuntimeError):
    pass


@dataclass
class EncoderConfig:
    num_layers: int = 8
    num_heads: int = 4
    model_dim: int = 64
    ffn_expansion: int = 4
    conv_kernel: int = 8
    relative_attention: bool = False
    max_rel_offset: int = 64
    dropout: float = 0.0

    def __post_init__(self):
        if self.num_layers < 1:
            raise ConformerError("num_layers must be >= 1")
        if self.model_dim % self.num_heads:
            raise ConformerError("model_dim must be divisible by num_heads")


@dataclass
class ActivationStack:
    """Layer outputs (index 0 = feature encoder) and per-block attention maps."""

    layers: list[torch.Tensor]  # L+1 tensors, each (B, T', D)
    attention: list[torch.Tensor] | None = None  # L tensors, each (B, H, T', T')

    @property
    def num_layers(self) -> int:
        return len(self.layers) - 1


class RelativePositionBias(nn.Module):
    """Learned per-head bias indexed by the clipped offset ``key - query``."""

    def __init__(self, num_heads: int, max_offset: int):
        super().__init__()
        self.max_offset = max_offset
        self.table = nn.Parameter(torch.zeros(num_heads, 2 * max_offset + 1))

    def forward(self, length: int) -> torch.Tensor:
        pos = torch.arange(length, device=self.table.device)
        offset = (pos[None, :] - pos[:, None]).clamp(-self.max_offset, self.max_offset)
        return self.table[:, offset + self.max_offset]


def relative_bias(length: int, module: RelativePositionBias) -> torch.Tensor:
    return module(length)


class FeedForward(nn.Module):
    def __init__(self, dim: int, expansion: int, dropout: float):
        super().__init__()
        self.norm = nn.LayerNorm(dim)
        self.up = nn.Linear(dim, dim * expansion)
        self.down = nn.Linear(dim * expansion, dim)
        self.dropout = dropout

    def forward(self, x):
        h = F.silu(self.up(self.norm(x)))
        h = F.dropout(h, self.dropout, self.training)
        return F.dropout(self.down(h), self.dropout, self.training)


class SelfAttention(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.heads = cfg.num_heads
        self.norm = nn.LayerNorm(cfg.model_dim)
        self.qkv = nn.Linear(cfg.model_dim, 3 * cfg.model_dim)
        self.out = nn.Linear(cfg.model_dim, cfg.model_dim)
        self.rel = RelativePositionBias(cfg.num_heads, cfg.max_rel_offset) \
            if cfg.relative_attention else None
        self.dropout = cfg.dropout

    def forward(self, x):
        b, t, d = x.shape
        q, k, v = self.qkv(self.norm(x)).view(b, t, 3, self.heads, d // self.heads).unbind(2)
        q, k, v = (z.transpose(1, 2) for z in (q, k, v))  # (B, H, T, dh)
        logits = q @ k.transpose(-1, -2) / (d // self.heads) ** 0.5
        if self.rel is not None:
            logits = logits + self.rel(t)
        attn = logits.softmax(-1)
        h = F.dropout(attn, self.dropout, self.training) @ v
        h = self.out(h.transpose(1, 2).reshape(b, t, d))
        return F.dropout(h, self.dropout, self.training), attn


class ConvModule(nn.Module):
    """pointwise + GLU -> depthwise -> LayerNorm -> swish -> pointwise."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        d = cfg.model_dim
        self.norm = nn.LayerNorm(d)
        self.pw1 = nn.Linear(d, 2 * d)
        self.depthwise = nn.Conv1d(d, d, cfg.conv_kernel, groups=d, padding="same",
                                   padding_mode="replicate")
        self.mid_norm = nn.LayerNorm(d)
        self.pw2 = nn.Linear(d, d)
        self.dropout = cfg.dropout

    def forward(self, x):
        h = F.glu(self.pw1(self.norm(x)), dim=-1)
        h = self.depthwise(h.transpose(1, 2)).transpose(1, 2)
        h = self.pw2(F.silu(self.mid_norm(h)))
        return F.dropout(h, self.dropout, self.training)


class ConformerBlock(nn.Module):
    """Macaron block: half-FFN, self-attention, conv, half-FFN, final LayerNorm.

    Each residual branch is multiplied by a learnable scalar (init 1); zeroing
    all four reduces the block to the final LayerNorm.
    """

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.ffn1 = FeedForward(cfg.model_dim, cfg.ffn_expansion, cfg.dropout)
        self.attn = SelfAttention(cfg)
        self.conv = ConvModule(cfg)
        self.ffn2 = FeedForward(cfg.model_dim, cfg.ffn_expansion, cfg.dropout)
        self.final_norm = nn.LayerNorm(cfg.model_dim)
        self.branch_scale = nn.Parameter(torch.ones(4))

    def forward(self, x):
        s = self.branch_scale
        x = x + 0.5 * s[0] * self.ffn1(x)
        a, attn = self.attn(x)
        x = x + s[1] * a
        x = x + s[2] * self.conv(x)
        x = x + 0.5 * s[3] * self.ffn2(x)
        return self.final_norm(x), attn


class ConformerEncoder(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.blocks = nn.ModuleList(ConformerBlock(cfg) for _ in range(cfg.num_layers))

    def forward(self, x: torch.Tensor, keep_attention: bool = False,
                upto: int | None = None) -> ActivationStack:
        layers, maps = [x], []
        for i, block in enumerate(self.blocks[:upto], start=1):
            x, attn = block(x)
            if not torch.isfinite(x).all():
                raise ConformerError(f"non-finite activations in layer {i}")
            layers.append(x)
            if keep_attention:
                maps.append(attn)
        return ActivationStack(layers, maps if keep_attention else None)


def conformer_forward(feats, encoder: ConformerEncoder,
                      keep_attention: bool = True) -> ActivationStack:
    x = getattr(feats, "frames", feats)
    if x.dim() == 2:
        x = x.unsqueeze(0)
    if x.shape[-1] != encoder.cfg.model_dim:
        raise ConformerError(f"feature dim {x.shape[-1]} != model_dim {encoder.cfg.model_dim}")
    return encoder(x, keep_attention=keep_attention)


def conformer_backward(loss: torch.Tensor, encoder: ConformerEncoder) -> dict[str, torch.Tensor]:
    """Parameter gradients of a scalar built from a cached forward pass."""
    if loss.grad_fn is None:
        raise ConformerError("missing cached activations: loss has no graph")
    names, params = zip(*encoder.named_parameters())
    grads = torch.autograd.grad(loss, params, allow_unused=True, retain_graph=True)
    return {n: (g if g is not None else torch.zeros_like(p))
            for n, p, g in zip(names, params, grads)}
