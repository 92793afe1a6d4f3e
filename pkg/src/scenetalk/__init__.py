"""Context-conditioned talking-face generation on a procedural toy world.

A two-stage latent video diffusion pipeline: masked scene context plus
audio drives a landmark-video generator, whose output in turn drives a
face-video generator conditioned on mouth strips and identity.  Both
stages pair a single-frame model with a first-frame-pinned sequence model,
which also supports autoregressive extension window by window.
"""

from .codec import CodecConfig, decode, encode
from .conditions import MODALITY_ORDER, ConditionBundle, ConditionEncoder
from .config import RunConfig, load_config, load_preset
from .model import (EMA, VARIANTS, ControlledDenoiser, UNetConfig,
                    VariantModel, build_variant_model, diffusion_loss)
from .schedule import (NoiseSchedule, build_linear_schedule, ddpm_sample,
                       p_sample_step, q_sample, q_sample_step)
from .synth import IdentityParams, SynthSample, WorldConfig, gen_sample

__version__ = "0.1.0"

__all__ = [
    "CodecConfig", "encode", "decode",
    "ConditionBundle", "ConditionEncoder", "MODALITY_ORDER",
    "RunConfig", "load_config", "load_preset",
    "UNetConfig", "ControlledDenoiser", "VariantModel", "build_variant_model",
    "diffusion_loss", "EMA", "VARIANTS",
    "NoiseSchedule", "build_linear_schedule", "q_sample", "q_sample_step",
    "p_sample_step", "ddpm_sample",
    "WorldConfig", "IdentityParams", "SynthSample", "gen_sample",
    "__version__",
]
