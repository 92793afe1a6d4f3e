"""End-to-end checks of the command line interface.

Everything runs in-process through cli.main with a deliberately tiny
config (16px faces, 4 frames, 5 diffusion steps, 3 training steps) so the
whole gen-data -> train -> sample -> eval chain stays in the seconds
range.  Models here are effectively untrained; quality is asserted only
for the self-evaluation where real data is scored against itself.
"""

import json
import math

import numpy as np
import pytest

from scenetalk import cli, tensorio
from scenetalk.synth import DirDataset

TINY = {
    "world": {"face_size": 16, "scene_size": 32, "n_frames": 4},
    "codec": {"factor": 2},
    "schedule": {"steps": 5, "beta_start": 1e-3, "beta_end": 0.09},
    "model": {"base_channels": 4, "channel_mult": [1, 2],
              "blocks_per_scale": 1, "attention_scales": [2],
              "cross_attention_scales": [1, 2], "cond_embed_dim": 8,
              "head_dim": 2, "time_embed_dim": 8, "dropout": 0.0},
    "train": {"lr": 1e-3, "batch_size": 2, "steps": 3, "ema_decay": 0.9,
              "grad_clip": 1.0, "log_every": 2, "seed": 0},
    "eval": {"embedder_dim": 8, "embedder_seed": 0},
}

VARIANTS = ("lmk-first", "lmk-seq", "face-first", "face-seq", "one-stage")


@pytest.fixture(scope="module")
def ws(tmp_path_factory):
    """Shared workspace: tiny config, a 3-sample dataset, 5 checkpoints."""
    root = tmp_path_factory.mktemp("cli_ws")
    cfg_path = root / "tiny.json"
    cfg_path.write_text(json.dumps(TINY))

    data = root / "data"
    rc = cli.main(["gen-data", "--out", str(data), "--num", "3",
                   "--seed-start", "7", "--config", str(cfg_path), "--png"])
    assert rc == cli.EXIT_OK

    # a second dataset with enough frames for two autoregressive windows
    data7 = root / "data7"
    rc = cli.main(["gen-data", "--out", str(data7), "--num", "1",
                   "--seed-start", "7", "--frames", "7",
                   "--config", str(cfg_path)])
    assert rc == cli.EXIT_OK

    ckpts = root / "ckpts"
    for variant in VARIANTS:
        rc = cli.main(["train", "--variant", variant,
                       "--train-seeds", "0:4",
                       "--out", str(ckpts / f"{variant}.ckpt"),
                       "--config", str(cfg_path)])
        assert rc == cli.EXIT_OK, variant

    return {"root": root, "config": cfg_path, "data": data,
            "data7": data7, "ckpts": ckpts}


# ------------------------------------------------------------- gen-data


def test_gen_data_layout(ws):
    data = ws["data"]
    for seed in (7, 8, 9):
        assert (data / str(seed) / "sample.json").exists()
        assert (data / str(seed) / "face.vt").exists()
    face = tensorio.load_tensor(data / "7" / "face.vt")
    assert face.shape == (4, 3, 16, 16)
    pngs = sorted(p.name for p in (data / "7" / "png").iterdir())
    assert any(name.startswith("face_") for name in pngs)
    assert any(name.startswith("scene_") for name in pngs)
    doc = json.loads((data / "manifest.json").read_text())
    runs = [r for r in doc["runs"] if r["command"] == "gen-data"]
    assert runs and runs[0]["count"] == 3


def test_gen_data_frames_flag(ws):
    face = tensorio.load_tensor(ws["data7"] / "7" / "face.vt")
    assert face.shape[0] == 7


def test_gen_data_rejects_missing_config(ws, tmp_path):
    rc = cli.main(["gen-data", "--out", str(tmp_path / "x"), "--num", "1",
                   "--config", str(tmp_path / "nope.json")])
    assert rc == cli.EXIT_DATA


# ---------------------------------------------------------------- train


def test_train_wrote_checkpoints_and_manifest(ws):
    for variant in VARIANTS:
        assert (ws["ckpts"] / f"{variant}.ckpt").exists()
    doc = json.loads((ws["ckpts"] / "manifest.json").read_text())
    runs = [r for r in doc["runs"] if r["command"] == "train"]
    assert sorted(r["variant"] for r in runs) == sorted(VARIANTS)
    for r in runs:
        assert math.isfinite(r["final_loss"])
        assert r["steps"] == 3


def test_train_requires_a_data_source(ws, tmp_path):
    rc = cli.main(["train", "--variant", "lmk-first",
                   "--out", str(tmp_path / "m.ckpt"),
                   "--config", str(ws["config"])])
    assert rc == cli.EXIT_USAGE


def test_train_rejects_unknown_variant(ws, tmp_path):
    rc = cli.main(["train", "--variant", "frobnicate",
                   "--train-seeds", "0:2",
                   "--out", str(tmp_path / "m.ckpt"),
                   "--config", str(ws["config"])])
    assert rc == cli.EXIT_USAGE


# --------------------------------------------------------------- sample


def test_sample_full_pipeline(ws):
    out = ws["root"] / "gen_full"
    rc = cli.main(["sample", "--checkpoints", str(ws["ckpts"]),
                   "--data", str(ws["data"]), "--out", str(out),
                   "--indices", "0:2", "--config", str(ws["config"])])
    assert rc == cli.EXIT_OK
    for seed in (7, 8):
        face = tensorio.load_tensor(out / str(seed) / "face.vt")
        assert face.shape == (4, 3, 16, 16)
        assert np.isfinite(face).all()
        assert (out / str(seed) / "landmarks.vt").exists()
        scene = tensorio.load_tensor(out / str(seed) / "scene.vt")
        assert scene.shape == (4, 3, 32, 32)
        meta = json.loads((out / str(seed) / "meta.json").read_text())
        assert meta["mode"] == "full"


def test_sample_gt_landmark_route_copies_the_driver(ws):
    out = ws["root"] / "gen_gt"
    rc = cli.main(["sample", "--checkpoints", str(ws["ckpts"]),
                   "--data", str(ws["data"]), "--out", str(out),
                   "--indices", "0", "--gt-landmarks",
                   "--config", str(ws["config"])])
    assert rc == cli.EXIT_OK
    saved = tensorio.load_tensor(out / "7" / "landmarks.vt")
    sample = DirDataset(ws["data"])[0]
    # the [0,1] -> [-1,1] -> [0,1] range mapping costs at most one ulp
    assert np.allclose(saved, sample.landmarks, atol=1e-6)
    assert np.abs(saved - sample.landmarks).max() < 1e-6
    meta = json.loads((out / "7" / "meta.json").read_text())
    assert meta["mode"] == "gt-landmarks"


def test_sample_one_stage(ws):
    out = ws["root"] / "gen_one"
    rc = cli.main(["sample", "--checkpoints", str(ws["ckpts"]),
                   "--data", str(ws["data"]), "--out", str(out),
                   "--indices", "0", "--one-stage",
                   "--config", str(ws["config"])])
    assert rc == cli.EXIT_OK
    assert (out / "7" / "face.vt").exists()
    assert not (out / "7" / "landmarks.vt").exists()
    meta = json.loads((out / "7" / "meta.json").read_text())
    assert meta["mode"] == "one-stage"


def test_sample_extend_two_windows(ws):
    out = ws["root"] / "gen_ext"
    rc = cli.main(["sample", "--checkpoints", str(ws["ckpts"]),
                   "--data", str(ws["data7"]), "--out", str(out),
                   "--indices", "0", "--extend", "2",
                   "--config", str(ws["config"])])
    assert rc == cli.EXIT_OK
    face = tensorio.load_tensor(out / "7" / "face.vt")
    assert face.shape == (7, 3, 16, 16)
    scene = tensorio.load_tensor(out / "7" / "scene.vt")
    assert scene.shape[0] == 7
    meta = json.loads((out / "7" / "meta.json").read_text())
    assert meta["windows"] == 2 and meta["frames"] == 7


def test_sample_missing_checkpoints(ws, tmp_path):
    rc = cli.main(["sample", "--checkpoints", str(tmp_path / "none"),
                   "--data", str(ws["data"]), "--out", str(tmp_path / "o"),
                   "--indices", "0", "--config", str(ws["config"])])
    assert rc == cli.EXIT_DATA


def test_sample_index_out_of_range(ws, tmp_path):
    rc = cli.main(["sample", "--checkpoints", str(ws["ckpts"]),
                   "--data", str(ws["data"]), "--out", str(tmp_path / "o"),
                   "--indices", "40", "--config", str(ws["config"])])
    assert rc == cli.EXIT_DATA


# ----------------------------------------------------------------- eval


def test_eval_dataset_against_itself(ws):
    out = ws["root"] / "eval_self"
    rc = cli.main(["eval", "--real", str(ws["data"]), "--gen", str(ws["data"]),
                   "--out", str(out), "--config", str(ws["config"])])
    assert rc == cli.EXIT_OK

    report = json.loads((out / "report.json").read_text())
    m = report["metrics"]
    assert m["fid_face"] < 1e-6
    assert m["fid_scene"] < 1e-6
    assert m["orientation"] == 1.0
    assert m["sync"]["mean"] > 0.9
    assert m["sync"]["failed"] == 0
    assert m["frame_consistency"]["mean"] > 0.8
    assert len(report["samples"]) == 3

    with (out / "report.csv").open() as fh:
        rows = fh.read().strip().splitlines()
    assert rows[0].startswith("seed,side,frame_consistency,sync")
    assert len(rows) == 4

    for name in ("metrics_summary.png", "per_sample_hist.png",
                 "orientation_scatter.png"):
        assert (out / name).exists(), name
    doc = json.loads((out / "manifest.json").read_text())
    entry = doc["runs"][-1]
    assert entry["command"] == "eval" and entry["figures"]


def test_eval_untrained_generation(ws):
    gen = ws["root"] / "gen_full"  # produced by the full-pipeline test
    if not gen.exists():  # tests may run individually
        test_sample_full_pipeline(ws)
    out = ws["root"] / "eval_gen"
    rc = cli.main(["eval", "--real", str(ws["data"]), "--gen", str(gen),
                   "--out", str(out), "--metrics", "fc,fid",
                   "--config", str(ws["config"])])
    assert rc == cli.EXIT_OK
    report = json.loads((out / "report.json").read_text())
    assert math.isfinite(report["metrics"]["fid_face"])
    assert "sync" not in report["metrics"]


def test_eval_flat_video_is_a_numeric_failure(ws, tmp_path):
    gen = tmp_path / "gen"
    (gen / "7").mkdir(parents=True)
    tensorio.save_tensor(gen / "7" / "face.vt",
                         np.zeros((4, 3, 16, 16), dtype=np.float32))
    out = tmp_path / "eval"
    rc = cli.main(["eval", "--real", str(ws["data"]), "--gen", str(gen),
                   "--out", str(out), "--metrics", "sync",
                   "--config", str(ws["config"])])
    assert rc == cli.EXIT_NUMERIC
    # the report is still written so the failure can be inspected
    report = json.loads((out / "report.json").read_text())
    assert report["metrics"]["sync"]["failed"] == 1


def test_eval_rejects_unknown_metric(ws, tmp_path):
    rc = cli.main(["eval", "--real", str(ws["data"]), "--gen", str(ws["data"]),
                   "--out", str(tmp_path / "o"), "--metrics", "fc,bogus",
                   "--config", str(ws["config"])])
    assert rc == cli.EXIT_USAGE


def test_eval_missing_gen_dir(ws, tmp_path):
    rc = cli.main(["eval", "--real", str(ws["data"]),
                   "--gen", str(tmp_path / "missing"),
                   "--out", str(tmp_path / "o"),
                   "--config", str(ws["config"])])
    assert rc == cli.EXIT_DATA


def test_eval_unmatched_sample(ws, tmp_path):
    gen = tmp_path / "gen"
    (gen / "999").mkdir(parents=True)
    tensorio.save_tensor(gen / "999" / "face.vt",
                         np.zeros((2, 3, 16, 16), dtype=np.float32))
    rc = cli.main(["eval", "--real", str(ws["data"]), "--gen", str(gen),
                   "--out", str(tmp_path / "o"),
                   "--config", str(ws["config"])])
    assert rc == cli.EXIT_DATA


# ------------------------------------------------------------- gradcheck


def test_gradcheck_command_passes(capsys):
    rc = cli.main(["gradcheck", "--module", "model"])
    out = capsys.readouterr().out
    assert rc == cli.EXIT_OK
    assert "PASS" in out


# ------------------------------------------------------------ bad usage


def test_unknown_command_is_usage_error():
    assert cli.main(["frobnicate"]) == cli.EXIT_USAGE


def test_unknown_flag_is_usage_error(ws):
    assert cli.main(["gen-data", "--out", "x", "--bogus"]) == cli.EXIT_USAGE


def test_bad_train_seed_range(ws, tmp_path):
    rc = cli.main(["train", "--variant", "lmk-first",
                   "--train-seeds", "5:2",
                   "--out", str(tmp_path / "m.ckpt"),
                   "--config", str(ws["config"])])
    assert rc == cli.EXIT_USAGE
