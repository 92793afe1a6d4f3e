"""Two-branch controlled video denoiser.

The main branch is a factorized space-time U-Net predicting the noise added
to a latent video.  The control branch is a trainable copy of the main
branch's stem, encoder and middle; it consumes the noisy latent plus a
spatial control video and feeds per-scale residuals back into the decoder
through zero-initialized 1x1 convolutions.  At initialization every
residual is exactly zero, so attaching the control branch does not change
the output at all; training moves it away from that identity.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple, Union

import torch
import torch.nn.functional as F
from torch import nn

from .blocks import (BasicBlock, Downsample, SpatioTemporalConv,
                     TimestepEmbedding, Upsample, ensure_batched, pick_groups,
                     restore_rank, zero_module)
from .conditions import ConditionBundle, ConditionEncoder
from .schedule import NoiseSchedule, q_sample


@dataclass(frozen=True)
class UNetConfig:
    """Architecture hyperparameters for one denoiser."""

    in_channels: int = 12
    cv_channels: Optional[int] = 12
    base_channels: int = 32
    channel_mult: Tuple[int, ...] = (1, 2, 4)
    blocks_per_scale: int = 2
    attention_scales: Tuple[int, ...] = (1, 2, 3)
    cross_attention_scales: Tuple[int, ...] = (1, 2, 3)
    cond_embed_dim: int = 128
    head_dim: int = 64
    time_embed_dim: int = 128
    dropout: float = 0.1

    def __post_init__(self):
        scales = range(1, len(self.channel_mult) + 1)
        for name in ("attention_scales", "cross_attention_scales"):
            bad = set(getattr(self, name)) - set(scales)
            if bad:
                raise ValueError(f"{name} {sorted(bad)} outside 1..{len(self.channel_mult)}")
        if self.blocks_per_scale < 1:
            raise ValueError("blocks_per_scale must be >= 1")


def _build_encoder(cfg: UNetConfig):
    """Stem/encoder/middle shared between the main and control branches.

    Returns (stem, down_blocks, downsamples, middle, skip_channels) where
    skip_channels records the width of every stored activation in order.
    """
    c0 = cfg.base_channels
    chs = [c0 * m for m in cfg.channel_mult]
    stem = SpatioTemporalConv(cfg.in_channels, c0, temporal=False)
    down_blocks = nn.ModuleList()
    downsamples = nn.ModuleList()
    skip_channels = [c0]
    cur = c0
    n_scales = len(chs)
    for i, ch in enumerate(chs):
        scale = i + 1
        attn = scale in cfg.attention_scales
        cross = scale in cfg.cross_attention_scales
        for _ in range(cfg.blocks_per_scale):
            down_blocks.append(BasicBlock(
                cur, ch, cfg.time_embed_dim,
                cond_dim=cfg.cond_embed_dim if cross else None,
                head_dim=cfg.head_dim, spatial_attn=attn, temporal_attn=attn,
                dropout=cfg.dropout))
            cur = ch
            skip_channels.append(cur)
        if i < n_scales - 1:
            downsamples.append(Downsample(cur))
            skip_channels.append(cur)
    deepest = n_scales
    middle = BasicBlock(
        cur, cur, cfg.time_embed_dim,
        cond_dim=cfg.cond_embed_dim if deepest in cfg.cross_attention_scales else None,
        head_dim=cfg.head_dim, spatial_attn=deepest in cfg.attention_scales,
        temporal_attn=deepest in cfg.attention_scales, dropout=cfg.dropout)
    return stem, down_blocks, downsamples, middle, skip_channels


def _run_encoder(module, x, temb, cond):
    """Walks stem/encoder, returning the final activation and all skips."""
    h = module.stem(x)
    skips = [h]
    block_iter = iter(module.down_blocks)
    down_iter = iter(module.downsamples)
    n_scales = len(module.cfg.channel_mult)
    for i in range(n_scales):
        for _ in range(module.cfg.blocks_per_scale):
            h = next(block_iter)(h, temb, cond)
            skips.append(h)
        if i < n_scales - 1:
            h = next(down_iter)(h)
            skips.append(h)
    return h, skips


class VideoUNet(nn.Module):
    """Denoising U-Net over latent videos with per-frame cross-attention."""

    def __init__(self, cfg: UNetConfig):
        super().__init__()
        self.cfg = cfg
        self.time_embed = TimestepEmbedding(cfg.time_embed_dim)
        (self.stem, self.down_blocks, self.downsamples, self.middle,
         self.skip_channels) = _build_encoder(cfg)
        c0 = cfg.base_channels
        chs = [c0 * m for m in cfg.channel_mult]
        self.up_blocks = nn.ModuleList()
        self.upsamples = nn.ModuleList()
        remaining = list(self.skip_channels)
        cur = chs[-1]
        for i in reversed(range(len(chs))):
            scale = i + 1
            attn = scale in cfg.attention_scales
            cross = scale in cfg.cross_attention_scales
            for _ in range(cfg.blocks_per_scale + 1):
                skip_ch = remaining.pop()
                self.up_blocks.append(BasicBlock(
                    cur + skip_ch, chs[i], cfg.time_embed_dim,
                    cond_dim=cfg.cond_embed_dim if cross else None,
                    head_dim=cfg.head_dim, spatial_attn=attn,
                    temporal_attn=attn, dropout=cfg.dropout))
                cur = chs[i]
            if i > 0:
                self.upsamples.append(Upsample(cur))
        assert not remaining
        self.head_norm = nn.GroupNorm(pick_groups(cur), cur)
        self.head = zero_module(nn.Conv2d(cur, cfg.in_channels, 3, padding=1))

    def _timesteps(self, t: Union[int, torch.Tensor], batch: int,
                   device: torch.device) -> torch.Tensor:
        if isinstance(t, int):
            return torch.full((batch,), t, dtype=torch.long, device=device)
        if t.ndim == 0:
            return t.reshape(1).expand(batch).long()
        if t.shape != (batch,):
            raise ValueError(f"expected {batch} timesteps, got shape {tuple(t.shape)}")
        return t.long()

    def _cond_tokens(self, cond: Optional[ConditionBundle], batch: int,
                     n_frames: int) -> Optional[torch.Tensor]:
        if cond is None:
            return None
        tok = cond.tokens
        if tok.shape[0] != batch or tok.shape[1] != n_frames:
            raise ValueError(
                f"condition tokens {tuple(tok.shape)} do not match video "
                f"batch/frames {(batch, n_frames)}")
        return tok

    def forward(self, x: torch.Tensor, t: Union[int, torch.Tensor],
                cond: Optional[ConditionBundle] = None,
                control: Optional[List[torch.Tensor]] = None) -> torch.Tensor:
        x, had_batch = ensure_batched(x)
        b, n = x.shape[0], x.shape[1]
        temb = self.time_embed(self._timesteps(t, b, x.device))
        tokens = self._cond_tokens(cond, b, n)
        h, skips = _run_encoder(self, x, temb, tokens)
        h = self.middle(h, temb, tokens)
        if control is not None:
            if len(control) != len(skips) + 1:
                raise ValueError(
                    f"expected {len(skips) + 1} control residuals, got {len(control)}")
            control = list(control)
            h = h + control.pop()
        n_scales = len(self.cfg.channel_mult)
        block_iter = iter(self.up_blocks)
        up_iter = iter(self.upsamples)
        for i in reversed(range(n_scales)):
            for _ in range(self.cfg.blocks_per_scale + 1):
                s = skips.pop()
                if control is not None:
                    s = s + control.pop()
                h = next(block_iter)(torch.cat([h, s], dim=2), temb, tokens)
            if i > 0:
                h = next(up_iter)(h)
        bn = h.shape[0] * h.shape[1]
        out = self.head(F.silu(self.head_norm(h.reshape(bn, *h.shape[2:]))))
        out = out.reshape(x.shape[0], x.shape[1], *out.shape[1:])
        return restore_rank(out, had_batch)


class ControlBranch(nn.Module):
    """Trainable copy of the encoder half, driven by an extra control video.

    The control video is embedded by a small stem whose output passes
    through a zero conv before being added to the noisy-latent features, and
    every emitted residual passes through its own zero conv.  All zero convs
    start at zero, which makes the attached model reproduce the plain one.
    """

    def __init__(self, unet: VideoUNet, cv_channels: int):
        super().__init__()
        cfg = unet.cfg
        self.cfg = cfg
        self.time_embed = copy.deepcopy(unet.time_embed)
        self.stem = copy.deepcopy(unet.stem)
        self.down_blocks = copy.deepcopy(unet.down_blocks)
        self.downsamples = copy.deepcopy(unet.downsamples)
        self.middle = copy.deepcopy(unet.middle)
        c0 = cfg.base_channels
        self.cv_stem = SpatioTemporalConv(cv_channels, c0, temporal=False)
        self.cv_zero = zero_module(nn.Conv2d(c0, c0, 1))
        self.zero_convs = nn.ModuleList(
            zero_module(nn.Conv2d(ch, ch, 1)) for ch in unet.skip_channels)
        mid_ch = c0 * cfg.channel_mult[-1]
        self.zero_mid = zero_module(nn.Conv2d(mid_ch, mid_ch, 1))

    def _per_frame(self, conv: nn.Conv2d, x: torch.Tensor) -> torch.Tensor:
        b, n = x.shape[0], x.shape[1]
        return conv(x.reshape(b * n, *x.shape[2:])).reshape(b, n, -1, *x.shape[3:])

    def forward(self, x: torch.Tensor, t: torch.Tensor,
                cond: Optional[torch.Tensor], c_v: torch.Tensor) -> List[torch.Tensor]:
        if c_v.shape[-2:] != x.shape[-2:] or c_v.shape[:2] != x.shape[:2]:
            raise ValueError(
                f"control video {tuple(c_v.shape)} does not align with latent "
                f"{tuple(x.shape)}")
        temb = self.time_embed(t)
        h = self.stem(x) + self._per_frame(self.cv_zero, self.cv_stem(c_v))
        skips = [h]
        block_iter = iter(self.down_blocks)
        down_iter = iter(self.downsamples)
        n_scales = len(self.cfg.channel_mult)
        for i in range(n_scales):
            for _ in range(self.cfg.blocks_per_scale):
                h = next(block_iter)(h, temb, cond)
                skips.append(h)
            if i < n_scales - 1:
                h = next(down_iter)(h)
                skips.append(h)
        h = self.middle(h, temb, cond)
        out = [self._per_frame(z, s) for z, s in zip(self.zero_convs, skips)]
        out.append(self._per_frame(self.zero_mid, h))
        return out


VARIANTS = ("lmk-first", "lmk-seq", "face-first", "face-seq", "one-stage")


@dataclass(frozen=True)
class VariantSpec:
    """What one model variant consumes and produces."""

    name: str
    modalities: Tuple[str, ...]
    cv_source: str            # "context" or "landmarks"
    sequence: bool            # False -> single frame
    pinned_first: bool        # True -> frame 1 is given, loss covers frames 2..N
    target: str               # "landmarks" or "face"


VARIANT_SPECS: Dict[str, VariantSpec] = {
    "lmk-first": VariantSpec("lmk-first", ("audio", "identity"), "context",
                             False, False, "landmarks"),
    "lmk-seq": VariantSpec("lmk-seq", ("audio",), "context",
                           True, True, "landmarks"),
    "face-first": VariantSpec("face-first", ("lip", "identity"), "landmarks",
                              False, False, "face"),
    "face-seq": VariantSpec("face-seq", ("lip", "identity"), "landmarks",
                            True, True, "face"),
    "one-stage": VariantSpec("one-stage", ("audio", "lip"), "context",
                             True, False, "face"),
}


class ControlledDenoiser(nn.Module):
    """A video U-Net plus control branch plus condition encoders, as one unit."""

    def __init__(self, cfg: UNetConfig, modalities: Sequence[str],
                 audio_dim: int = 8, identity_dim: int = 6, lip_channels: int = 1):
        super().__init__()
        self.cfg = cfg
        self.unet = VideoUNet(cfg)
        self.control = (ControlBranch(self.unet, cfg.cv_channels)
                        if cfg.cv_channels else None)
        self.cond_encoder = ConditionEncoder(modalities, cfg.cond_embed_dim,
                                             audio_dim=audio_dim,
                                             identity_dim=identity_dim,
                                             lip_channels=lip_channels)

    def encode_conditions(self, raw: Dict[str, torch.Tensor],
                          n_frames: int) -> ConditionBundle:
        return self.cond_encoder(raw, n_frames)

    def forward(self, x: torch.Tensor, t: Union[int, torch.Tensor],
                cond: Optional[ConditionBundle] = None,
                c_v: Optional[torch.Tensor] = None) -> torch.Tensor:
        x_b, had_batch = ensure_batched(x)
        control = None
        if c_v is not None:
            if self.control is None:
                raise ValueError("model was built without a control branch")
            cv_b, _ = ensure_batched(c_v)
            b, n = x_b.shape[0], x_b.shape[1]
            t_vec = self.unet._timesteps(t, b, x_b.device)
            tokens = self.unet._cond_tokens(cond, b, n)
            control = self.control(x_b, t_vec, tokens, cv_b)
        out = self.unet(x_b, t, cond, control)
        return restore_rank(out, had_batch)


@dataclass
class VariantModel:
    """A denoiser bound to its variant wiring."""

    spec: VariantSpec
    model: ControlledDenoiser
    ema: Optional["EMA"] = None


def build_variant_model(name: str, cfg: UNetConfig, audio_dim: int = 8,
                        identity_dim: int = 6, lip_channels: int = 1,
                        with_ema: bool = True) -> VariantModel:
    if name not in VARIANT_SPECS:
        raise ValueError(f"unknown variant {name!r}; expected one of {VARIANTS}")
    spec = VARIANT_SPECS[name]
    model = ControlledDenoiser(cfg, spec.modalities, audio_dim=audio_dim,
                               identity_dim=identity_dim, lip_channels=lip_channels)
    return VariantModel(spec, model, EMA(model) if with_ema else None)


def diffusion_loss(model: ControlledDenoiser, schedule: NoiseSchedule,
                   x0: torch.Tensor, cond: Optional[ConditionBundle],
                   c_v: Optional[torch.Tensor],
                   generator: Optional[torch.Generator] = None,
                   pinned_first: bool = False,
                   t_override: Optional[torch.Tensor] = None,
                   eps_override: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Noise-prediction MSE at a uniformly drawn timestep.

    With ``pinned_first`` the first frame of the noisy input is replaced by
    the clean first frame and the loss is averaged over frames 2..N only.
    ``t_override`` and ``eps_override`` pin the timestep draw and the noise
    draw; they exist so tests can evaluate the loss as a deterministic
    function.
    """
    x0_b, _ = ensure_batched(x0)
    b = x0_b.shape[0]
    if t_override is not None:
        t = t_override.long()
        if t.ndim == 0:
            t = t.reshape(1).expand(b)
    else:
        if generator is None:
            raise ValueError("a generator is required when t_override is not given")
        t = torch.randint(1, schedule.steps + 1, (b,), generator=generator)
    if eps_override is not None:
        eps = eps_override.to(x0_b.dtype)
        if eps.ndim == x0_b.ndim - 1:
            eps = eps.unsqueeze(0)
    else:
        eps = torch.randn(x0_b.shape, generator=generator, dtype=x0_b.dtype)
    x_t = q_sample(x0_b, t, eps, schedule)
    if pinned_first:
        if x0_b.shape[1] < 2:
            raise ValueError("pinned-first loss needs at least 2 frames")
        x_t = torch.cat([x0_b[:, :1], x_t[:, 1:]], dim=1)
    cv_b = None
    if c_v is not None:
        cv_b, _ = ensure_batched(c_v)
    eps_hat = model(x_t, t, cond, cv_b)
    if pinned_first:
        return F.mse_loss(eps_hat[:, 1:], eps[:, 1:])
    return F.mse_loss(eps_hat, eps)


class EMA:
    """Exponential moving average of a model's parameters."""

    def __init__(self, model: nn.Module, decay: float = 0.9999):
        self.decay = decay
        self.shadow = {k: v.detach().clone()
                       for k, v in model.state_dict().items()
                       if v.dtype.is_floating_point}

    @torch.no_grad()
    def update(self, model: nn.Module) -> None:
        for k, v in model.state_dict().items():
            if k in self.shadow:
                self.shadow[k].mul_(self.decay).add_(v, alpha=1.0 - self.decay)

    @torch.no_grad()
    def copy_to(self, model: nn.Module) -> None:
        state = model.state_dict()
        for k, v in self.shadow.items():
            state[k].copy_(v)

    def state_dict(self) -> Dict[str, torch.Tensor]:
        return dict(self.shadow)

    def load_state_dict(self, state: Dict[str, torch.Tensor]) -> None:
        for k in self.shadow:
            if k not in state:
                raise KeyError(f"EMA state missing {k}")
            self.shadow[k] = state[k].detach().clone()
