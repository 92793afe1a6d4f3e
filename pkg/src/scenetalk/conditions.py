"""Per-frame condition codes and the encoders that produce them.

Each conditioning modality is embedded to one code vector per frame and the
codes are stacked, in a fixed modality order, into a token tensor of shape
``[B, N, M, d]`` that the denoiser's cross-attention consumes.  Identity is
a per-clip quantity and gets replicated across frames.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Sequence, Tuple

import torch
from einops import rearrange
from torch import nn

MODALITY_ORDER: Tuple[str, ...] = ("audio", "identity", "lip")


@dataclass
class ConditionBundle:
    """Stacked per-frame condition tokens.

    tokens: [B, N, M, d] with modalities ordered as in ``names``.
    """

    tokens: torch.Tensor
    names: Tuple[str, ...]

    def __post_init__(self):
        if self.tokens.ndim != 4:
            raise ValueError("tokens must be [B, N, M, d]")
        if self.tokens.shape[2] != len(self.names):
            raise ValueError("token count does not match modality names")

    @property
    def n_frames(self) -> int:
        return int(self.tokens.shape[1])

    @staticmethod
    def from_codes(codes: Dict[str, torch.Tensor]) -> "ConditionBundle":
        """Stacks per-modality codes ([B, N, d] each) in canonical order."""
        names = tuple(m for m in MODALITY_ORDER if m in codes)
        if set(codes) - set(names):
            raise ValueError(f"unknown modalities: {sorted(set(codes) - set(names))}")
        if not names:
            raise ValueError("at least one modality is required")
        frames = {codes[m].shape[1] for m in names}
        if len(frames) != 1:
            raise ValueError(f"modalities disagree on frame count: {sorted(frames)}")
        return ConditionBundle(torch.stack([codes[m] for m in names], dim=2), names)


class AudioEncoder(nn.Module):
    """MLP from per-frame audio feature vectors to per-frame codes."""

    def __init__(self, in_dim: int, out_dim: int):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(in_dim, out_dim), nn.SiLU(),
                                 nn.Linear(out_dim, out_dim))

    def forward(self, feats: torch.Tensor) -> torch.Tensor:
        if feats.ndim != 3:
            raise ValueError("audio features must be [B, N, d_a]")
        return self.net(feats)


class IdentityEncoder(nn.Module):
    """MLP from a per-clip identity vector to a code replicated across frames."""

    def __init__(self, in_dim: int, out_dim: int):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(in_dim, out_dim), nn.SiLU(),
                                 nn.Linear(out_dim, out_dim))

    def forward(self, identity: torch.Tensor, n_frames: int) -> torch.Tensor:
        if identity.ndim != 2:
            raise ValueError("identity must be [B, d_id]")
        code = self.net(identity)
        return code[:, None, :].expand(-1, n_frames, -1)


class LipEncoder(nn.Module):
    """Small conv net from per-frame mouth strips to per-frame codes."""

    def __init__(self, out_dim: int, in_channels: int = 1):
        super().__init__()
        self.conv = nn.Sequential(
            nn.Conv2d(in_channels, 16, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(16, 32, 3, stride=2, padding=1), nn.SiLU(),
        )
        self.out = nn.Linear(32, out_dim)

    def forward(self, strips: torch.Tensor) -> torch.Tensor:
        if strips.ndim != 5:
            raise ValueError("lip strips must be [B, N, C, h, w]")
        b, n = strips.shape[:2]
        h = self.conv(rearrange(strips, "b n c h w -> (b n) c h w"))
        h = h.mean(dim=(-2, -1))
        return rearrange(self.out(h), "(b n) d -> b n d", b=b)


class ConditionEncoder(nn.Module):
    """Encodes the modalities a model variant consumes into a ConditionBundle."""

    def __init__(self, modalities: Sequence[str], cond_dim: int,
                 audio_dim: int = 8, identity_dim: int = 6,
                 lip_channels: int = 1):
        super().__init__()
        unknown = set(modalities) - set(MODALITY_ORDER)
        if unknown:
            raise ValueError(f"unknown modalities: {sorted(unknown)}")
        self.modalities = tuple(m for m in MODALITY_ORDER if m in modalities)
        self.cond_dim = cond_dim
        if "audio" in self.modalities:
            self.audio = AudioEncoder(audio_dim, cond_dim)
        if "identity" in self.modalities:
            self.identity = IdentityEncoder(identity_dim, cond_dim)
        if "lip" in self.modalities:
            self.lip = LipEncoder(cond_dim, lip_channels)

    def forward(self, raw: Dict[str, torch.Tensor], n_frames: int) -> ConditionBundle:
        missing = [m for m in self.modalities if m not in raw]
        if missing:
            raise ValueError(f"missing condition inputs: {missing}")
        extra = set(raw) - set(self.modalities)
        if extra:
            raise ValueError(
                f"this model takes {self.modalities}, got extra inputs "
                f"{sorted(extra)}")
        codes: Dict[str, torch.Tensor] = {}
        for m in self.modalities:
            if m == "audio":
                codes[m] = self.audio(raw[m])
            elif m == "identity":
                codes[m] = self.identity(raw[m], n_frames)
            else:
                codes[m] = self.lip(raw[m])
            if codes[m].shape[1] != n_frames:
                raise ValueError(
                    f"{m} codes cover {codes[m].shape[1]} frames, expected {n_frames}")
        return ConditionBundle.from_codes(codes)
