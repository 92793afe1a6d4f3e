"""Training and sampling orchestration for the two-stage generator.

Stage 1 turns a masked scene plus audio into a landmark video; stage 2
turns that landmark video plus a mouth strip and identity into the face
video.  Each stage is split into a single-frame model and a sequence model
that is conditioned on the clip's first frame: during both training and
sampling, frame 1 of the noisy latent is replaced by the clean first-frame
latent at every step, and only the remaining frames are learned.  Chaining
the sequence models on their own last frames extends a clip to
1 + k*(N-1) frames across k windows.

Videos live in [0, 1]; latents are space-to-depth packings of the same
videos mapped to [-1, 1].
"""

from __future__ import annotations

import contextlib
import math
import time
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F

from . import codec
from .codec import CodecConfig
from .model import VariantModel, VariantSpec, diffusion_loss
from .schedule import NoiseSchedule, ddpm_sample
from .synth import SynthSample


def to_model_space(video: torch.Tensor) -> torch.Tensor:
    return video * 2.0 - 1.0


def to_pixel_space(video: torch.Tensor) -> torch.Tensor:
    return ((video + 1.0) / 2.0).clamp(0.0, 1.0)


def encode_video(video: np.ndarray, codec_cfg: CodecConfig,
                 dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """[N,C,H,W] pixel video -> latent tensor in model space."""
    t = torch.from_numpy(np.ascontiguousarray(video)).to(dtype)
    return codec.encode(to_model_space(t), codec_cfg)


def decode_latent(latent: torch.Tensor, codec_cfg: CodecConfig) -> np.ndarray:
    """Latent tensor -> [N,C,H,W] pixel video clipped to [0, 1]."""
    video = to_pixel_space(codec.decode(latent, codec_cfg))
    return video.detach().cpu().numpy().astype(np.float32)


@dataclass
class TrainBatch:
    x0: torch.Tensor                      # [B, N, C, h, w] latent targets
    conds: Dict[str, torch.Tensor]        # raw modality inputs, batched
    c_v: torch.Tensor                     # [B, N, C, h, w] control latents
    n_frames: int


def assemble_batch(spec: VariantSpec, samples: Sequence[SynthSample],
                   codec_cfg: CodecConfig,
                   dtype: torch.dtype = torch.float32) -> TrainBatch:
    """Builds the latent targets, control video and raw conditions for a variant."""
    xs, cvs = [], []
    conds: Dict[str, List[torch.Tensor]] = {m: [] for m in spec.modalities}
    for sample in samples:
        face_lat = encode_video(sample.face, codec_cfg, dtype)
        lmk_lat = encode_video(sample.landmarks, codec_cfg, dtype)
        ctx_lat = encode_video(sample.context, codec_cfg, dtype)
        x0 = lmk_lat if spec.target == "landmarks" else face_lat
        c_v = ctx_lat if spec.cv_source == "context" else lmk_lat
        sel = slice(None) if spec.sequence else slice(0, 1)
        xs.append(x0[sel])
        cvs.append(c_v[sel])
        if "audio" in spec.modalities:
            conds["audio"].append(torch.from_numpy(sample.audio).to(dtype)[sel])
        if "identity" in spec.modalities:
            conds["identity"].append(
                torch.from_numpy(sample.identity.vector()).to(dtype))
        if "lip" in spec.modalities:
            conds["lip"].append(torch.from_numpy(sample.lip).to(dtype)[sel])
    x0 = torch.stack(xs)
    return TrainBatch(
        x0=x0,
        conds={k: torch.stack(v) for k, v in conds.items()},
        c_v=torch.stack(cvs),
        n_frames=x0.shape[1])


def train_step(vm: VariantModel, schedule: NoiseSchedule, batch: TrainBatch,
               optimizer: torch.optim.Optimizer, generator: torch.Generator,
               grad_clip: float = 1.0) -> float:
    vm.model.train()
    bundle = vm.model.encode_conditions(batch.conds, batch.n_frames)
    loss = diffusion_loss(vm.model, schedule, batch.x0, bundle, batch.c_v,
                          generator=generator, pinned_first=vm.spec.pinned_first)
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    if grad_clip:
        torch.nn.utils.clip_grad_norm_(vm.model.parameters(), grad_clip)
    optimizer.step()
    if vm.ema is not None:
        vm.ema.update(vm.model)
    value = float(loss.detach())
    if math.isnan(value):
        raise FloatingPointError("training loss is NaN")
    return value


def train_variant(vm: VariantModel, schedule: NoiseSchedule, dataset,
                  codec_cfg: CodecConfig, steps: int, batch_size: int,
                  lr: float = 2e-4, grad_clip: float = 1.0, seed: int = 0,
                  first_frame_sampler: Optional[Callable[[Sequence[SynthSample]],
                                                         torch.Tensor]] = None,
                  log_every: int = 0,
                  log: Callable[[str], None] = print) -> List[float]:
    """Adam training loop over batches drawn from the dataset by seed.

    ``first_frame_sampler`` supports an optional exposure fine-tune for the
    sequence variants: when given, it replaces the clean first frame of
    each batch with a sampled one before the pinned loss is formed.
    """
    generator = torch.Generator().manual_seed(seed)
    optimizer = torch.optim.Adam(vm.model.parameters(), lr=lr)
    losses: List[float] = []
    t0 = time.time()
    for step in range(steps):
        idx = torch.randint(0, len(dataset), (batch_size,), generator=generator)
        batch = assemble_batch(vm.spec, [dataset[int(i)] for i in idx], codec_cfg)
        if first_frame_sampler is not None:
            if not vm.spec.pinned_first:
                raise ValueError("first-frame exposure only applies to sequence variants")
            sampled = first_frame_sampler([dataset[int(i)] for i in idx])
            batch.x0 = torch.cat([sampled, batch.x0[:, 1:]], dim=1)
        losses.append(train_step(vm, schedule, batch, optimizer, generator, grad_clip))
        if log_every and (step + 1) % log_every == 0:
            recent = losses[-log_every:]
            log(f"[{vm.spec.name}] step {step + 1}/{steps} "
                f"loss {sum(recent) / len(recent):.4f} "
                f"({time.time() - t0:.0f}s)")
    return losses


@contextlib.contextmanager
def ema_weights(vm: VariantModel):
    """Temporarily loads the EMA weights into the model."""
    if vm.ema is None:
        yield
        return
    backup = {k: v.detach().clone() for k, v in vm.model.state_dict().items()}
    vm.ema.copy_to(vm.model)
    try:
        yield
    finally:
        vm.model.load_state_dict(backup)


def _sample_latent(vm: VariantModel, schedule: NoiseSchedule,
                   conds: Dict[str, torch.Tensor], n_frames: int,
                   c_v: torch.Tensor, generator: torch.Generator,
                   first_frame: Optional[torch.Tensor] = None,
                   use_ema: bool = True) -> torch.Tensor:
    """Draws one latent clip [1, n, C, h, w] from a variant model."""
    model = vm.model
    model.eval()
    shape = (1, n_frames) + tuple(c_v.shape[-3:])
    project = None
    if first_frame is not None:
        pin = first_frame.reshape(1, 1, *first_frame.shape[-3:])

        def project(x: torch.Tensor, t: int) -> torch.Tensor:
            return torch.cat([pin.to(x.dtype), x[:, 1:]], dim=1)

    ctx = ema_weights(vm) if use_ema else contextlib.nullcontext()
    with ctx, torch.no_grad():
        bundle = model.encode_conditions(conds, n_frames)
        cv_b = c_v.reshape(shape)

        def eps_model(x: torch.Tensor, t: int) -> torch.Tensor:
            return model(x, t, bundle, cv_b)

        latent = ddpm_sample(eps_model, shape, schedule, generator=generator,
                             dtype=c_v.dtype, project=project)
    return latent


def _batched_conds(sample: SynthSample, modalities: Sequence[str],
                   sel: slice, dtype: torch.dtype) -> Dict[str, torch.Tensor]:
    conds: Dict[str, torch.Tensor] = {}
    if "audio" in modalities:
        conds["audio"] = torch.from_numpy(sample.audio).to(dtype)[None, sel]
    if "identity" in modalities:
        conds["identity"] = torch.from_numpy(sample.identity.vector()).to(dtype)[None]
    if "lip" in modalities:
        conds["lip"] = torch.from_numpy(sample.lip).to(dtype)[None, sel]
    return conds


def run_pipeline(models: Dict[str, VariantModel], schedule: NoiseSchedule,
                 codec_cfg: CodecConfig, sample: SynthSample,
                 generator: torch.Generator, gt_landmarks: bool = False,
                 use_ema: bool = True,
                 dtype: torch.dtype = torch.float32) -> Dict[str, np.ndarray]:
    """Runs both stages on one sample's conditions.

    With ``gt_landmarks`` stage 2 is driven by the sample's true landmark
    video instead of stage-1 output.  The stage-1 latent is handed to
    stage 2 exactly as produced, with no decode/re-encode in between.
    """
    n = sample.face.shape[0]
    ctx_lat = encode_video(sample.context, codec_cfg, dtype)

    if gt_landmarks:
        lmk_lat = encode_video(sample.landmarks, codec_cfg, dtype)[None]
    else:
        first = _sample_latent(
            models["lmk-first"], schedule,
            _batched_conds(sample, models["lmk-first"].spec.modalities,
                           slice(0, 1), dtype),
            1, ctx_lat[0:1], generator, use_ema=use_ema)
        lmk_lat = _sample_latent(
            models["lmk-seq"], schedule,
            _batched_conds(sample, models["lmk-seq"].spec.modalities,
                           slice(None), dtype),
            n, ctx_lat, generator, first_frame=first[:, 0],
            use_ema=use_ema)

    face_first = _sample_latent(
        models["face-first"], schedule,
        _batched_conds(sample, models["face-first"].spec.modalities,
                       slice(0, 1), dtype),
        1, lmk_lat[0, 0:1], generator, use_ema=use_ema)
    face_lat = _sample_latent(
        models["face-seq"], schedule,
        _batched_conds(sample, models["face-seq"].spec.modalities,
                       slice(None), dtype),
        n, lmk_lat[0], generator, first_frame=face_first[:, 0],
        use_ema=use_ema)

    return {
        "landmark_latent": lmk_lat[0],
        "face_latent": face_lat[0],
        "landmarks": decode_latent(lmk_lat[0], codec_cfg),
        "face": decode_latent(face_lat[0], codec_cfg),
    }


def run_one_stage(model: VariantModel, schedule: NoiseSchedule,
                  codec_cfg: CodecConfig, sample: SynthSample,
                  generator: torch.Generator, use_ema: bool = True,
                  dtype: torch.dtype = torch.float32) -> Dict[str, np.ndarray]:
    """Single-pass ablation: context plus audio and lip straight to faces."""
    n = sample.face.shape[0]
    ctx_lat = encode_video(sample.context, codec_cfg, dtype)
    face_lat = _sample_latent(
        model, schedule,
        _batched_conds(sample, model.spec.modalities, slice(None), dtype),
        n, ctx_lat, generator, use_ema=use_ema)
    return {
        "face_latent": face_lat[0],
        "face": decode_latent(face_lat[0], codec_cfg),
    }


def extend_autoregressive(models: Dict[str, VariantModel],
                          schedule: NoiseSchedule, codec_cfg: CodecConfig,
                          sample: SynthSample, windows: int,
                          generator: torch.Generator, n_frames: int,
                          gt_landmarks: bool = False, use_ema: bool = True,
                          dtype: torch.dtype = torch.float32) -> Dict[str, np.ndarray]:
    """Chains the sequence models over k windows with a one-frame overlap.

    The sample must carry 1 + windows*(n_frames-1) frames of conditions.
    Window 0 runs the full two-step pipeline; each later window is pinned
    to the last generated frame of the previous one.
    """
    if windows < 1:
        raise ValueError("windows must be >= 1")
    total = 1 + windows * (n_frames - 1)
    if sample.face.shape[0] < total:
        raise ValueError(
            f"sample carries {sample.face.shape[0]} frames, need {total}")
    ctx_lat = encode_video(sample.context, codec_cfg, dtype)
    gt_lmk_lat = (encode_video(sample.landmarks, codec_cfg, dtype)
                  if gt_landmarks else None)

    lmk_chunks: List[torch.Tensor] = []
    face_chunks: List[torch.Tensor] = []
    lmk_prev = face_prev = None
    for w in range(windows):
        start = w * (n_frames - 1)
        sel = slice(start, start + n_frames)
        if gt_landmarks:
            lmk_lat = gt_lmk_lat[None, sel]
        elif w == 0:
            first = _sample_latent(
                models["lmk-first"], schedule,
                _batched_conds(sample, models["lmk-first"].spec.modalities,
                               slice(0, 1), dtype),
                1, ctx_lat[0:1], generator, use_ema=use_ema)
            lmk_lat = _sample_latent(
                models["lmk-seq"], schedule,
                _batched_conds(sample, models["lmk-seq"].spec.modalities,
                               sel, dtype),
                n_frames, ctx_lat[sel], generator, first_frame=first[:, 0],
                use_ema=use_ema)
        else:
            lmk_lat = _sample_latent(
                models["lmk-seq"], schedule,
                _batched_conds(sample, models["lmk-seq"].spec.modalities,
                               sel, dtype),
                n_frames, ctx_lat[sel], generator, first_frame=lmk_prev,
                use_ema=use_ema)
        if w == 0:
            face_first = _sample_latent(
                models["face-first"], schedule,
                _batched_conds(sample, models["face-first"].spec.modalities,
                               slice(0, 1), dtype),
                1, lmk_lat[0, 0:1], generator, use_ema=use_ema)
            pin = face_first[:, 0]
        else:
            pin = face_prev
        face_lat = _sample_latent(
            models["face-seq"], schedule,
            _batched_conds(sample, models["face-seq"].spec.modalities,
                           sel, dtype),
            n_frames, lmk_lat[0], generator, first_frame=pin,
            use_ema=use_ema)
        lmk_prev = lmk_lat[0, -1][None]
        face_prev = face_lat[0, -1][None]
        keep = slice(None) if w == 0 else slice(1, None)
        lmk_chunks.append(lmk_lat[0, keep])
        face_chunks.append(face_lat[0, keep])

    lmk_full = torch.cat(lmk_chunks, dim=0)
    face_full = torch.cat(face_chunks, dim=0)
    return {
        "landmark_latent": lmk_full,
        "face_latent": face_full,
        "landmarks": decode_latent(lmk_full, codec_cfg),
        "face": decode_latent(face_full, codec_cfg),
    }


def composite(scene_masked: np.ndarray, face: np.ndarray,
              head_box: Tuple[int, int, int, int]) -> np.ndarray:
    """Pastes a face video into the head box of a masked scene video."""
    y0, x0, bh, bw = head_box
    scene = np.array(scene_masked, dtype=np.float32, copy=True)
    if scene.ndim != 4 or face.ndim != 4 or scene.shape[0] != face.shape[0]:
        raise ValueError("scene and face must be [N,C,H,W] with equal N")
    if y0 < 0 or x0 < 0 or y0 + bh > scene.shape[2] or x0 + bw > scene.shape[3]:
        raise ValueError(f"head box {head_box} falls outside the scene")
    if face.shape[-2:] != (bh, bw):
        t = torch.from_numpy(face)
        face = F.interpolate(t, size=(bh, bw), mode="bilinear",
                             align_corners=False).numpy()
    scene[:, :, y0:y0 + bh, x0:x0 + bw] = face
    return scene
