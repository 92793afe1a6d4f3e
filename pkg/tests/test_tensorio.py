import struct

import numpy as np
import pytest
import torch

from scenetalk.conditions import ConditionBundle
from scenetalk.model import build_variant_model
from scenetalk.tensorio import (CKPT_MAGIC, DataError, TENSOR_MAGIC,
                                load_checkpoint, load_tensor, save_checkpoint,
                                save_frames_png, save_tensor)

from conftest import bitwise_equal, np_bitwise_equal, seeded_video

COND = {"audio_dim": 8, "identity_dim": 6, "lip_channels": 1}


@pytest.mark.parametrize("shape", [(), (7,), (3, 4), (2, 3, 4), (2, 1, 3, 2)])
def test_tensor_round_trip(tmp_path, shape):
    rng = np.random.default_rng(0)
    arr = rng.standard_normal(shape).astype(np.float32)
    path = tmp_path / "t.vt"
    save_tensor(path, arr)
    back = load_tensor(path)
    assert back.shape == arr.shape
    assert np_bitwise_equal(back, arr)


def test_tensor_save_casts_to_float32(tmp_path):
    path = tmp_path / "t.vt"
    save_tensor(path, np.array([1.0, 2.5], dtype=np.float64))
    back = load_tensor(path)
    assert back.dtype == np.float32
    assert np.all(back == np.array([1.0, 2.5], dtype=np.float32))


def test_tensor_load_error_cases(tmp_path):
    with pytest.raises(DataError):
        load_tensor(tmp_path / "missing.vt")

    bad_magic = tmp_path / "bad.vt"
    bad_magic.write_bytes(b"NOTATENS" + b"\x00" * 16)
    with pytest.raises(DataError):
        load_tensor(bad_magic)

    short = tmp_path / "short.vt"
    short.write_bytes(TENSOR_MAGIC[:4])
    with pytest.raises(DataError):
        load_tensor(short)

    good = tmp_path / "good.vt"
    save_tensor(good, np.ones((4, 4), dtype=np.float32))
    blob = good.read_bytes()

    truncated = tmp_path / "trunc.vt"
    truncated.write_bytes(blob[:-8])
    with pytest.raises(DataError):
        load_tensor(truncated)

    versioned = tmp_path / "ver.vt"
    versioned.write_bytes(blob[:8] + struct.pack("<I", 99) + blob[12:])
    with pytest.raises(DataError):
        load_tensor(versioned)

    dtyped = tmp_path / "dt.vt"
    dtyped.write_bytes(blob[:12] + struct.pack("<I", 7) + blob[16:])
    with pytest.raises(DataError):
        load_tensor(dtyped)


def _make_vm(tiny_unet_cfg, with_ema=True):
    torch.manual_seed(0)
    return build_variant_model("lmk-seq", tiny_unet_cfg, **COND,
                               with_ema=with_ema)


def test_checkpoint_round_trip(tmp_path, tiny_unet_cfg):
    vm = _make_vm(tiny_unet_cfg)
    vm.ema.decay = 0.5
    with torch.no_grad():
        next(vm.model.parameters()).add_(1.0)
    vm.ema.update(vm.model)

    path = tmp_path / "m.ckpt"
    save_checkpoint(path, vm, COND, extra={"steps": 12})
    loaded, header = load_checkpoint(path)

    assert header["variant"] == "lmk-seq"
    assert header["conditioning"] == COND
    assert header["extra"] == {"steps": 12}
    assert loaded.spec.name == "lmk-seq"
    assert loaded.model.cfg == vm.model.cfg
    assert loaded.ema.decay == 0.5

    orig_state = vm.model.state_dict()
    new_state = loaded.model.state_dict()
    assert set(orig_state) == set(new_state)
    for k in orig_state:
        assert bitwise_equal(new_state[k], orig_state[k]), k
    for k in vm.ema.shadow:
        assert bitwise_equal(loaded.ema.shadow[k], vm.ema.shadow[k]), k


def test_checkpoint_preserves_forward_pass(tmp_path, tiny_unet_cfg):
    vm = _make_vm(tiny_unet_cfg)
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, vm, COND)
    loaded, _ = load_checkpoint(path)
    x = seeded_video((1, 2, 4, 8, 8), seed=1)
    c_v = seeded_video((1, 2, 4, 8, 8), seed=2)
    bundle = ConditionBundle.from_codes(
        {"audio": seeded_video((1, 2, 6), seed=3)})
    a = vm.model.eval()(x, 3, bundle, c_v)
    b = loaded.model.eval()(x, 3, bundle, c_v)
    assert bitwise_equal(a, b)


def test_checkpoint_without_ema(tmp_path, tiny_unet_cfg):
    vm = _make_vm(tiny_unet_cfg, with_ema=False)
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, vm, COND)
    loaded, header = load_checkpoint(path)
    assert header["ema_decay"] is None
    assert loaded.ema is None


def test_checkpoint_error_cases(tmp_path, tiny_unet_cfg):
    with pytest.raises(DataError):
        load_checkpoint(tmp_path / "missing.ckpt")

    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"12345678" + b"\x00" * 32)
    with pytest.raises(DataError):
        load_checkpoint(bad)

    vm = _make_vm(tiny_unet_cfg)
    good = tmp_path / "good.ckpt"
    save_checkpoint(good, vm, COND)
    blob = good.read_bytes()

    cut_payload = tmp_path / "cut.ckpt"
    cut_payload.write_bytes(blob[:-100])
    with pytest.raises(DataError):
        load_checkpoint(cut_payload)

    cut_header = tmp_path / "cuthdr.ckpt"
    cut_header.write_bytes(blob[:20])
    with pytest.raises(DataError):
        load_checkpoint(cut_header)
    assert blob[:8] == CKPT_MAGIC


def test_save_frames_png(tmp_path):
    video = np.random.default_rng(0).random((3, 3, 8, 8)).astype(np.float32)
    save_frames_png(tmp_path / "frames", video, prefix="lm")
    files = sorted(p.name for p in (tmp_path / "frames").iterdir())
    assert files == ["lm_000.png", "lm_001.png", "lm_002.png"]
    with pytest.raises(DataError):
        save_frames_png(tmp_path / "frames2", video[:, :1])
