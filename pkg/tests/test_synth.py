import numpy as np
import pytest

from scenetalk.synth import (DirDataset, SeedDataset, WorldConfig, _lip_rows,
                             audio_regression_weights, average_pool,
                             gen_sample, load_sample, redness, render_face,
                             save_sample)

from conftest import np_bitwise_equal

CFG = WorldConfig()

ARRAY_FIELDS = ("face", "landmarks", "scene", "scene_masked", "context",
                "lip", "audio", "portrait", "envelope", "mouth_opening",
                "yaw")


def test_gen_sample_is_deterministic():
    a = gen_sample(CFG, 5)
    b = gen_sample(CFG, 5)
    for name in ARRAY_FIELDS:
        assert np_bitwise_equal(getattr(a, name), getattr(b, name)), name
    assert a.side == b.side
    assert np_bitwise_equal(a.identity.vector(), b.identity.vector())


def test_shapes_and_ranges():
    s = gen_sample(CFG, 0)
    assert s.face.shape == (8, 3, 32, 32)
    assert s.landmarks.shape == (8, 3, 32, 32)
    assert s.scene.shape == (8, 3, 64, 64)
    assert s.context.shape == (8, 3, 32, 32)
    assert s.lip.shape == (8, 1, 8, 32)
    assert s.audio.shape == (8, 8)
    assert s.portrait.shape == (3, 32, 32)
    for name in ("face", "landmarks", "scene", "scene_masked", "context",
                 "lip", "portrait"):
        arr = getattr(s, name)
        assert arr.min() >= 0.0 and arr.max() <= 1.0, name
    assert s.envelope.min() > 0.0 and s.envelope.max() < 1.0
    assert np.isfinite(s.audio).all()
    assert s.side in (-1, 1)


def test_envelope_variance_floor():
    stds = [gen_sample(CFG, seed).envelope.std() for seed in range(40)]
    assert min(stds) >= CFG.envelope_floor


def test_mouth_opening_is_affine_in_envelope():
    s = gen_sample(CFG, 7)
    ident = s.identity
    expected = (ident.mouth_base + ident.mouth_gain * s.envelope) * CFG.face_size
    assert np_bitwise_equal(s.mouth_opening, expected)
    corr = np.corrcoef(s.mouth_opening, s.envelope)[0, 1]
    assert corr > 1.0 - 1e-12


def test_audio_linear_readout_recovers_envelope():
    w = audio_regression_weights(CFG.audio_dim)
    for seed in range(10):
        s = gen_sample(CFG, seed)
        est = s.audio.astype(np.float64) @ w
        corr = np.corrcoef(est, s.envelope)[0, 1]
        assert corr > 0.99, seed


def test_yaw_matches_side_and_magnitude_range():
    for seed in range(20):
        s = gen_sample(CFG, seed)
        assert np.all(np.sign(s.yaw) == s.side)
        assert np.all(np.abs(s.yaw) >= 0.6) and np.all(np.abs(s.yaw) <= 1.0)


def test_scene_mask_and_composite_agree():
    s = gen_sample(CFG, 3)
    y0, x0, bh, bw = s.head_box
    assert s.head_box == (4, 16, 32, 32)
    box = s.scene_masked[:, :, y0:y0 + bh, x0:x0 + bw]
    assert float(np.abs(box).max()) == 0.0
    assert np_bitwise_equal(s.scene[:, :, y0:y0 + bh, x0:x0 + bw], s.face)
    outside = s.scene.copy()
    outside[:, :, y0:y0 + bh, x0:x0 + bw] = 0.0
    assert np_bitwise_equal(outside, s.scene_masked)


def test_context_is_pooled_masked_scene():
    s = gen_sample(CFG, 4)
    expected = average_pool(s.scene_masked, CFG.context_factor)
    assert np_bitwise_equal(s.context, expected.astype(np.float32))


def test_lip_strip_is_redness_crop():
    s = gen_sample(CFG, 6)
    r0, r1 = _lip_rows(CFG)
    assert (r0, r1) == (18, 26)
    expected = redness(s.face)[:, None, r0:r1, :].astype(np.float32)
    assert np_bitwise_equal(s.lip, expected)
    assert s.lip.max() > 0.3


def test_landmark_channel_masses():
    # Each splatted dot deposits mass 9 before clipping; the head oval and
    # eye dots never overlap, the four mouth dots may.
    for seed in range(5):
        s = gen_sample(CFG, seed)
        masses = s.landmarks.sum(axis=(2, 3))
        assert np.allclose(masses[:, 0], 54.0, atol=1e-3), seed
        assert np.allclose(masses[:, 1], 18.0, atol=1e-3), seed
        assert np.all(masses[:, 2] > 20.0) and np.all(masses[:, 2] <= 36.001)


def test_portrait_is_neutral_render():
    s = gen_sample(CFG, 8)
    face, _ = render_face(CFG, s.identity, 0.35, 0.0)
    assert np_bitwise_equal(s.portrait, face)


def test_n_frames_override_keeps_identity_and_side():
    base = gen_sample(CFG, 9)
    longer = gen_sample(CFG, 9, n_frames=19)
    assert longer.face.shape[0] == 19
    assert longer.audio.shape == (19, 8)
    assert longer.envelope.shape == (19,)
    assert longer.context.shape[0] == 19
    assert longer.side == base.side
    assert np_bitwise_equal(longer.identity.vector(), base.identity.vector())


def test_average_pool_values():
    v = np.arange(16, dtype=np.float64).reshape(1, 4, 4)
    pooled = average_pool(v, 2)
    assert pooled.shape == (1, 2, 2)
    assert np.allclose(pooled[0], [[2.5, 4.5], [10.5, 12.5]])
    same = average_pool(v, 1)
    assert np_bitwise_equal(same, v)
    assert same is not v


def test_redness_isolates_red():
    img = np.zeros((3, 2, 2), dtype=np.float32)
    img[0, 0, 0] = 0.9
    img[1, 0, 0] = 0.2
    img[1, 1, 1] = 0.8
    r = redness(img)
    assert r[0, 0] == pytest.approx(0.7)
    assert r[1, 1] == 0.0


def test_seed_dataset_indexes_by_seed():
    ds = SeedDataset(CFG, [11, 22])
    assert len(ds) == 2
    assert np_bitwise_equal(ds[1].face, gen_sample(CFG, 22).face)


def test_save_load_round_trip(tmp_path):
    tiny = WorldConfig(face_size=16, scene_size=32, n_frames=4)
    s = gen_sample(tiny, 13)
    save_sample(tmp_path / "13", s)
    back = load_sample(tmp_path / "13")
    for name in ARRAY_FIELDS:
        assert np_bitwise_equal(getattr(back, name), getattr(s, name)), name
    assert back.seed == 13
    assert back.side == s.side
    assert back.head_box == s.head_box
    assert np_bitwise_equal(back.identity.vector(), s.identity.vector())


def test_dir_dataset_orders_by_seed(tmp_path):
    tiny = WorldConfig(face_size=16, scene_size=32, n_frames=4)
    for seed in (33, 2, 10):
        save_sample(tmp_path / str(seed), gen_sample(tiny, seed))
    ds = DirDataset(tmp_path)
    assert len(ds) == 3
    assert [ds[i].seed for i in range(3)] == [2, 10, 33]


def test_dir_dataset_missing_or_empty_raises(tmp_path):
    with pytest.raises(FileNotFoundError):
        DirDataset(tmp_path / "absent")
    (tmp_path / "empty").mkdir()
    with pytest.raises(FileNotFoundError):
        DirDataset(tmp_path / "empty")
