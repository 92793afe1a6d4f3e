"""Exactly invertible latent codec based on space-to-depth rearrangement.

A learned autoencoder would make round-trip identity untestable, so the
latent space here is a pure pixel shuffle: every f x f spatial block is
folded into channels.  encode/decode are mutual inverses bit for bit and
preserve the L2 norm, which keeps the diffusion math auditable end to end.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from einops import rearrange


@dataclass(frozen=True)
class CodecConfig:
    factor: int = 2

    def __post_init__(self):
        if self.factor < 1:
            raise ValueError("factor must be >= 1")

    def latent_channels(self, channels: int) -> int:
        return channels * self.factor * self.factor


def _check_rank(x: torch.Tensor) -> bool:
    """Returns True when a leading batch axis is present."""
    if x.ndim == 4:
        return False
    if x.ndim == 5:
        return True
    raise ValueError(f"expected a [N,C,H,W] or [B,N,C,H,W] tensor, got rank {x.ndim}")


def encode(video: torch.Tensor, cfg: CodecConfig) -> torch.Tensor:
    """Folds f x f spatial blocks into channels: [..,C,H,W] -> [..,C*f*f,H/f,W/f]."""
    batched = _check_rank(video)
    f = cfg.factor
    h, w = video.shape[-2], video.shape[-1]
    if h % f or w % f:
        raise ValueError(f"spatial size {h}x{w} not divisible by factor {f}")
    if batched:
        return rearrange(video, "b n c (h fh) (w fw) -> b n (c fh fw) h w", fh=f, fw=f)
    return rearrange(video, "n c (h fh) (w fw) -> n (c fh fw) h w", fh=f, fw=f)


def decode(latent: torch.Tensor, cfg: CodecConfig) -> torch.Tensor:
    """Inverse of :func:`encode`."""
    batched = _check_rank(latent)
    f = cfg.factor
    c = latent.shape[-3]
    if c % (f * f):
        raise ValueError(f"latent channel count {c} not divisible by factor^2 = {f * f}")
    if batched:
        return rearrange(latent, "b n (c fh fw) h w -> b n c (h fh) (w fw)", fh=f, fw=f)
    return rearrange(latent, "n (c fh fw) h w -> n c (h fh) (w fw)", fh=f, fw=f)
