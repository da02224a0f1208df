"""Strided 1-D convolutional feature encoder: 100 Hz mel frames -> 25 Hz features."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

ENCODED_FRAME_PERIOD = 0.040


class FeatEncError(ValueError):
    pass


@dataclass
class FeatEncConfig:
    mel_bins: int = 80
    kernels: tuple[int, int, int] = (3, 3, 3)
    strides: tuple[int, int, int] = (2, 2, 1)
    channels: tuple[int, int] = (128, 128)
    output_dim: int = 64

    def __post_init__(self):
        self.kernels = tuple(self.kernels)
        self.strides = tuple(self.strides)
        self.channels = tuple(self.channels)
        if len(self.kernels) != 3 or len(self.strides) != 3 or len(self.channels) != 2:
            raise FeatEncError("feature encoder has exactly three layers")
        if sorted(self.strides) != [1, 2, 2]:
            raise FeatEncError("strides must be two 2s and one 1")
        if any(k % 2 == 0 for k in self.kernels):
            raise FeatEncError("kernel widths must be odd for centred same-padding")


@dataclass
class EncodedFeatures:
    frames: torch.Tensor  # (B, T', D) or (T', D)
    frame_period: float = ENCODED_FRAME_PERIOD

    @property
    def num_frames(self) -> int:
        return self.frames.shape[-2]


def encoded_length(num_mel_frames: int, strides=(2, 2, 1)) -> int:
    t = num_mel_frames
    for s in strides:
        t = -(-t // s)
    return t


class FeatureEncoder(nn.Module):
    """Three conv layers with replicate same-padding and GELU, then a frame LayerNorm.

    Input is standardized with fixed per-bin statistics (buffers, set from the
    training corpus) before the first convolution.
    """

    def __init__(self, cfg: FeatEncConfig):
        super().__init__()
        self.cfg = cfg
        dims = (cfg.mel_bins, *cfg.channels, cfg.output_dim)
        self.convs = nn.ModuleList(
            nn.Conv1d(dims[i], dims[i + 1], cfg.kernels[i], stride=cfg.strides[i],
                      padding=cfg.kernels[i] // 2, padding_mode="replicate")
            for i in range(3)
        )
        self.norm = nn.LayerNorm(cfg.output_dim)
        self.register_buffer("mel_mean", torch.zeros(cfg.mel_bins))
        self.register_buffer("mel_std", torch.ones(cfg.mel_bins))

    def set_input_stats(self, mean, std) -> None:
        self.mel_mean.copy_(torch.as_tensor(mean, dtype=self.mel_mean.dtype))
        self.mel_std.copy_(torch.as_tensor(std, dtype=self.mel_std.dtype).clamp_min(1e-3))

    def forward(self, mel: torch.Tensor) -> torch.Tensor:
        # mel: (B, T, M) -> (B, T', D)
        if mel.shape[-2] < 4:
            raise FeatEncError("too few frames for subsampling")
        x = ((mel - self.mel_mean) / self.mel_std).transpose(1, 2)
        for conv in self.convs:
            x = F.gelu(conv(x))
        return self.norm(x.transpose(1, 2))


def _as_batch(mel, like: torch.Tensor) -> torch.Tensor:
    frames = getattr(mel, "frames", mel)
    x = torch.as_tensor(np.asarray(frames) if not torch.is_tensor(frames) else frames,
                        dtype=like.dtype)
    return x.unsqueeze(0) if x.dim() == 2 else x


def encode_features(mel, encoder: FeatureEncoder, requires_grad: bool = False) -> EncodedFeatures:
    """Run the encoder on a MelSpectrogram (or (B, T, M) tensor).

    With ``requires_grad`` the input is made a leaf so that
    :func:`featenc_backward` can return input gradients.
    """
    x = _as_batch(mel, next(encoder.parameters()))
    if requires_grad:
        x = x.detach().requires_grad_(True)
    out = encoder(x)
    feats = EncodedFeatures(out)
    feats._input = x  # cached for backward
    return feats


def featenc_backward(feats: EncodedFeatures, grad_output: torch.Tensor,
                     encoder: FeatureEncoder) -> tuple[torch.Tensor | None, dict[str, torch.Tensor]]:
    """Gradients of ``<grad_output, features>`` w.r.t. the input and every parameter."""
    if feats.frames.grad_fn is None:
        raise FeatEncError("missing cached activations: run encode_features first")
    x = getattr(feats, "_input", None)
    names, params = zip(*encoder.named_parameters())
    inputs = list(params) + ([x] if x is not None and x.requires_grad else [])
    grads = torch.autograd.grad(feats.frames, inputs, grad_outputs=grad_output,
                                allow_unused=True)
    pgrads = {n: (g if g is not None else torch.zeros_like(p))
              for n, p, g in zip(names, params, grads)}
    xgrad = grads[len(params)] if len(inputs) > len(params) else None
    return xgrad, pgrads
