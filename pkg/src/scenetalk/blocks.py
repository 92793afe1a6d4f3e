"""Building blocks for the factorized space-time denoising U-Net.

Video tensors are ``[N, C, H, W]`` (frames, channels, height, width) with an
optional leading batch axis ``[B, N, C, H, W]``.  Every kernel here accepts
either rank and returns the same rank it was given.  Spatial operators fold
frames into the batch axis and therefore never mix frames; temporal
operators are the only place information crosses frame boundaries, except
for the explicitly per-frame cross-attention which mixes nothing across
time at all.
"""

from __future__ import annotations

import math
from typing import Optional, Tuple

import torch
import torch.nn.functional as F
from einops import rearrange
from torch import nn


def zero_module(module: nn.Module) -> nn.Module:
    """Zeroes all parameters of a module and returns it."""
    for p in module.parameters():
        nn.init.zeros_(p)
    return module


def pick_groups(channels: int) -> int:
    """Largest group count out of (8, 4, 2, 1) that divides the channel width."""
    for g in (8, 4, 2, 1):
        if channels % g == 0:
            return g
    return 1


def ensure_batched(x: torch.Tensor) -> Tuple[torch.Tensor, bool]:
    """Normalizes a video tensor to [B,N,C,H,W]; returns (tensor, had_batch)."""
    if x.ndim == 4:
        return x.unsqueeze(0), False
    if x.ndim == 5:
        return x, True
    raise ValueError(f"expected a rank-4 or rank-5 video tensor, got rank {x.ndim}")


def restore_rank(x: torch.Tensor, had_batch: bool) -> torch.Tensor:
    return x if had_batch else x.squeeze(0)


def sinusoidal_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Sinusoidal features of integer timesteps.

    With half = dim // 2 the frequencies are 10000**(-i / half) for
    i in [0, half) and the output is [sin(t * f_i) | cos(t * f_i)].
    """
    if dim % 2:
        raise ValueError("embedding dim must be even")
    if t.ndim != 1:
        raise ValueError("t must be a 1-D tensor of timesteps")
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half
    ).to(t.device)
    args = t.double()[:, None] * freqs[None, :]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


class TimestepEmbedding(nn.Module):
    """Sinusoidal features followed by a two-layer MLP."""

    def __init__(self, dim: int = 128, hidden: Optional[int] = None):
        super().__init__()
        self.dim = dim
        hidden = hidden or dim
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.SiLU(), nn.Linear(hidden, hidden))
        self.out_dim = hidden

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        dtype = self.mlp[0].weight.dtype
        return self.mlp(sinusoidal_embedding(t, self.dim).to(dtype))


class SpatioTemporalConv(nn.Module):
    """A 2-D spatial convolution followed by a depthwise temporal convolution.

    The temporal kernel has width 3 and zero padding, so single-frame inputs
    pass through it as a learned per-channel scaling of the centre tap.
    """

    def __init__(self, in_channels: int, out_channels: int,
                 kernel_size: int = 3, temporal: bool = True):
        super().__init__()
        self.spatial = nn.Conv2d(in_channels, out_channels, kernel_size,
                                 padding=kernel_size // 2)
        self.temporal = None
        if temporal:
            self.temporal = nn.Conv1d(out_channels, out_channels, 3, padding=1,
                                      groups=out_channels)
            # Start as a pure centre tap so the block behaves like its 2-D
            # counterpart before training.
            with torch.no_grad():
                self.temporal.weight.zero_()
                self.temporal.weight[:, :, 1] = 1.0
                self.temporal.bias.zero_()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x, had_batch = ensure_batched(x)
        b, n, _, _, _ = x.shape
        h = self.spatial(rearrange(x, "b n c h w -> (b n) c h w"))
        if self.temporal is not None:
            hw = h.shape[-2:]
            h = rearrange(h, "(b n) c h w -> (b h w) c n", b=b, n=n)
            h = self.temporal(h)
            h = rearrange(h, "(b h w) c n -> b n c h w", b=b, h=hw[0], w=hw[1])
        else:
            h = rearrange(h, "(b n) c h w -> b n c h w", b=b, n=n)
        return restore_rank(h, had_batch)


def _attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    """Scaled dot-product attention over the second-to-last axis."""
    scale = 1.0 / math.sqrt(q.shape[-1])
    scores = torch.einsum("...qd,...kd->...qk", q, k) * scale
    weights = torch.softmax(scores, dim=-1)
    return torch.einsum("...qk,...kd->...qd", weights, v)


def split_heads(x: torch.Tensor, heads: int) -> torch.Tensor:
    return rearrange(x, "b t (h d) -> b h t d", h=heads)


def merge_heads(x: torch.Tensor) -> torch.Tensor:
    return rearrange(x, "b h t d -> b t (h d)")


class SpatialSelfAttention(nn.Module):
    """Self-attention over the H*W pixels of each frame independently."""

    def __init__(self, channels: int, head_dim: int = 64):
        super().__init__()
        self.heads = max(1, channels // head_dim)
        self.norm = nn.GroupNorm(pick_groups(channels), channels)
        self.to_qkv = nn.Linear(channels, channels * 3)
        self.proj = nn.Linear(channels, channels)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x, had_batch = ensure_batched(x)
        b, n, c, hh, ww = x.shape
        h = self.norm(rearrange(x, "b n c h w -> (b n) c h w"))
        tokens = rearrange(h, "bn c h w -> bn (h w) c")
        q, k, v = self.to_qkv(tokens).chunk(3, dim=-1)
        out = merge_heads(_attention(split_heads(q, self.heads),
                                     split_heads(k, self.heads),
                                     split_heads(v, self.heads)))
        out = self.proj(out)
        out = rearrange(out, "(b n) (h w) c -> b n c h w", b=b, n=n, h=hh, w=ww)
        return restore_rank(out, had_batch)


class TemporalSelfAttention(nn.Module):
    """Self-attention over the N frames at each spatial position."""

    def __init__(self, channels: int, head_dim: int = 64):
        super().__init__()
        self.heads = max(1, channels // head_dim)
        self.norm = nn.GroupNorm(pick_groups(channels), channels)
        self.to_qkv = nn.Linear(channels, channels * 3)
        self.proj = nn.Linear(channels, channels)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x, had_batch = ensure_batched(x)
        b, n, c, hh, ww = x.shape
        h = self.norm(rearrange(x, "b n c h w -> (b n) c h w"))
        tokens = rearrange(h, "(b n) c h w -> (b h w) n c", b=b, n=n)
        q, k, v = self.to_qkv(tokens).chunk(3, dim=-1)
        out = merge_heads(_attention(split_heads(q, self.heads),
                                     split_heads(k, self.heads),
                                     split_heads(v, self.heads)))
        out = self.proj(out)
        out = rearrange(out, "(b h w) n c -> b n c h w", b=b, h=hh, w=ww)
        return restore_rank(out, had_batch)


class FrameCrossAttention(nn.Module):
    """Cross-attention from the pixels of frame i to the condition tokens of
    frame i, strictly per frame.

    Queries are the H*W pixel vectors of one frame; keys and values come from
    that frame's condition tokens only, so changing the conditions of frame j
    cannot move the output at any other frame.

    A learned anchor token is appended to the keys/values of every frame.
    With a single condition token the softmax weight would be 1.0 for every
    query, making the output a per-channel constant over the frame -- a
    pattern the following group norms mostly cancel, which starves the
    conditioning path.  The anchor gives every query a second logit, so the
    mixing weight (and hence the output) varies per pixel.
    """

    def __init__(self, channels: int, cond_dim: int, head_dim: int = 64):
        super().__init__()
        self.heads = max(1, channels // head_dim)
        self.norm = nn.GroupNorm(pick_groups(channels), channels)
        self.to_q = nn.Linear(channels, channels)
        self.to_k = nn.Linear(cond_dim, channels)
        self.to_v = nn.Linear(cond_dim, channels)
        self.proj = nn.Linear(channels, channels)
        self.anchor = nn.Parameter(torch.randn(1, 1, cond_dim) / cond_dim ** 0.5)

    def forward(self, x: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        x, had_batch = ensure_batched(x)
        cond, _ = _ensure_cond_batched(cond, had_batch)
        b, n, c, hh, ww = x.shape
        if cond.shape[0] != b or cond.shape[1] != n:
            raise ValueError(
                f"condition tokens {tuple(cond.shape)} do not match video frames "
                f"{(b, n)}")
        h = self.norm(rearrange(x, "b n c h w -> (b n) c h w"))
        q = self.to_q(rearrange(h, "bn c h w -> bn (h w) c"))
        kv = rearrange(cond, "b n m d -> (b n) m d")
        kv = torch.cat([kv, self.anchor.expand(kv.shape[0], -1, -1)], dim=1)
        k, v = self.to_k(kv), self.to_v(kv)
        out = merge_heads(_attention(split_heads(q, self.heads),
                                     split_heads(k, self.heads),
                                     split_heads(v, self.heads)))
        out = self.proj(out)
        out = rearrange(out, "(b n) (h w) c -> b n c h w", b=b, n=n, h=hh, w=ww)
        return restore_rank(out, had_batch)


def _ensure_cond_batched(cond: torch.Tensor, like_batched: bool) -> Tuple[torch.Tensor, bool]:
    if cond.ndim == 3:
        return cond.unsqueeze(0), False
    if cond.ndim == 4:
        return cond, True
    raise ValueError(f"expected [N,M,D] or [B,N,M,D] condition tokens, got rank {cond.ndim}")


class BasicBlock(nn.Module):
    """Residual space-time conv pair with optional attention stages.

    Layout: GN -> SiLU -> st-conv -> GN -> (+ time shift) -> SiLU -> dropout
    -> st-conv, with a learned shortcut when the width changes.  The time
    shift lands after the second norm: a per-channel constant added before
    normalization would be partially (for one-channel groups: completely)
    cancelled by it.  Spatial, temporal and frame-wise cross-attention
    follow, each wrapped in its own residual connection.
    """

    def __init__(self, in_channels: int, out_channels: int, temb_dim: int,
                 cond_dim: Optional[int] = None, head_dim: int = 64,
                 spatial_attn: bool = False, temporal_attn: bool = False,
                 dropout: float = 0.0):
        super().__init__()
        self.norm1 = nn.GroupNorm(pick_groups(in_channels), in_channels)
        self.conv1 = SpatioTemporalConv(in_channels, out_channels)
        self.time_proj = nn.Linear(temb_dim, out_channels)
        self.norm2 = nn.GroupNorm(pick_groups(out_channels), out_channels)
        self.dropout = nn.Dropout(dropout)
        self.conv2 = SpatioTemporalConv(out_channels, out_channels)
        self.shortcut = (nn.Conv2d(in_channels, out_channels, 1)
                         if in_channels != out_channels else nn.Identity())
        self.spatial_attn = (SpatialSelfAttention(out_channels, head_dim)
                             if spatial_attn else None)
        self.temporal_attn = (TemporalSelfAttention(out_channels, head_dim)
                              if temporal_attn else None)
        self.cross_attn = (FrameCrossAttention(out_channels, cond_dim, head_dim)
                           if cond_dim else None)

    def _frame_op(self, op: nn.Module, x: torch.Tensor) -> torch.Tensor:
        if isinstance(op, nn.Identity):
            return x
        b = x.shape[0]
        return rearrange(op(rearrange(x, "b n c h w -> (b n) c h w")),
                         "(b n) c h w -> b n c h w", b=b)

    def forward(self, x: torch.Tensor, temb: torch.Tensor,
                cond: Optional[torch.Tensor] = None) -> torch.Tensor:
        h = self.conv1(F.silu(self._frame_op(self.norm1, x)))
        h = self._frame_op(self.norm2, h)
        h = h + self.time_proj(F.silu(temb))[:, None, :, None, None]
        h = F.silu(h)
        h = self.conv2(self.dropout(h))
        x = self._frame_op(self.shortcut, x) + h
        if self.spatial_attn is not None:
            x = x + self.spatial_attn(x)
        if self.temporal_attn is not None:
            x = x + self.temporal_attn(x)
        if self.cross_attn is not None and cond is not None:
            x = x + self.cross_attn(x, cond)
        return x


class Downsample(nn.Module):
    """Stride-2 spatial convolution applied per frame."""

    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, stride=2, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x, had_batch = ensure_batched(x)
        b = x.shape[0]
        h = self.conv(rearrange(x, "b n c h w -> (b n) c h w"))
        return restore_rank(rearrange(h, "(b n) c h w -> b n c h w", b=b), had_batch)


class Upsample(nn.Module):
    """Nearest-neighbour 2x upsampling followed by a smoothing conv, per frame."""

    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x, had_batch = ensure_batched(x)
        b = x.shape[0]
        h = rearrange(x, "b n c h w -> (b n) c h w")
        h = self.conv(F.interpolate(h, scale_factor=2.0, mode="nearest"))
        return restore_rank(rearrange(h, "(b n) c h w -> b n c h w", b=b), had_batch)
