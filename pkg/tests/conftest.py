import numpy as np
import pytest
import torch

import scenetalk as st


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


@pytest.fixture
def tiny_unet_cfg():
    """Smallest config that still exercises both scales and all attention."""
    return st.UNetConfig(in_channels=4, cv_channels=4, base_channels=4,
                         channel_mult=(1, 2), blocks_per_scale=1,
                         attention_scales=(1, 2), cross_attention_scales=(1, 2),
                         cond_embed_dim=6, head_dim=2, time_embed_dim=8,
                         dropout=0.0)


@pytest.fixture
def tiny_world_cfg():
    return st.WorldConfig(face_size=16, scene_size=32, n_frames=4)


def make_raw_conds(modalities, n_frames, batch=1, audio_dim=8, seed=0,
                   dtype=torch.float32, lip_shape=(1, 8, 32)):
    gen = torch.Generator().manual_seed(seed)
    raw = {}
    if "audio" in modalities:
        raw["audio"] = torch.randn(batch, n_frames, audio_dim, generator=gen,
                                   dtype=dtype)
    if "identity" in modalities:
        raw["identity"] = torch.randn(batch, 6, generator=gen, dtype=dtype)
    if "lip" in modalities:
        raw["lip"] = torch.randn(batch, n_frames, *lip_shape, generator=gen,
                                 dtype=dtype)
    return raw


def seeded_video(shape, seed=0, dtype=torch.float32):
    gen = torch.Generator().manual_seed(seed)
    return torch.randn(*shape, generator=gen, dtype=dtype)


def bitwise_equal(a: torch.Tensor, b: torch.Tensor) -> bool:
    if a.shape != b.shape or a.dtype != b.dtype:
        return False
    return a.contiguous().view(torch.uint8 if a.dtype == torch.uint8 else
                               {torch.float32: torch.int32,
                                torch.float64: torch.int64}[a.dtype]).equal(
        b.contiguous().view({torch.float32: torch.int32,
                             torch.float64: torch.int64}[b.dtype]))


def np_bitwise_equal(a: np.ndarray, b: np.ndarray) -> bool:
    return a.shape == b.shape and a.tobytes() == b.tobytes()
