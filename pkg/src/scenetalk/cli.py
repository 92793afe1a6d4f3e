"""Command line interface.

Subcommands: gen-data, train, sample, eval, gradcheck.  Every command
appends a manifest entry to its output directory.  Exit codes: 0 success,
1 usage error, 2 data error (missing or malformed files), 3 numeric
failure (NaN losses or failed gradient checks).
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
import time
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch

from . import figures, manifest, metrics, pipeline, synth, tensorio
from .config import ConfigError, RunConfig, load_config
from .model import VARIANTS, build_variant_model
from .schedule import build_linear_schedule
from .synth import DirDataset, SeedDataset, WorldConfig, gen_sample
from .tensorio import DataError

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # noqa: D102 - argparse hook
        raise UsageError(message)


def _parse_indices(text: str, limit: int) -> List[int]:
    text = text.strip()
    if ":" in text:
        lo, hi = text.split(":", 1)
        out = list(range(int(lo or 0), int(hi or limit)))
    elif "," in text:
        out = [int(v) for v in text.split(",") if v.strip()]
    else:
        out = [int(text)]
    bad = [i for i in out if i < 0 or i >= limit]
    if bad:
        raise DataError(f"indices {bad} out of range for dataset of size {limit}")
    return out


def _schedule_from(cfg: RunConfig):
    return build_linear_schedule(cfg.schedule.steps, cfg.schedule.beta_start,
                                 cfg.schedule.beta_end)


def _load_models(ckpt_dir: Path, names: Sequence[str]) -> Dict:
    ckpt_dir = Path(ckpt_dir)
    models = {}
    for name in names:
        path = ckpt_dir / f"{name}.ckpt"
        if not path.exists():
            raise DataError(f"missing checkpoint {path}")
        models[name], _ = tensorio.load_checkpoint(path)
    return models


# ---------------------------------------------------------------- commands


def cmd_gen_data(args) -> int:
    cfg = load_config(args.config)
    out = Path(args.out)
    frames = args.frames or cfg.world.n_frames
    seeds = list(range(args.seed_start, args.seed_start + args.num))
    for seed in seeds:
        sample = gen_sample(cfg.world, seed, n_frames=frames)
        synth.save_sample(out / str(seed), sample)
    if args.png and seeds:
        sample = gen_sample(cfg.world, seeds[0], n_frames=frames)
        tensorio.save_frames_png(out / str(seeds[0]) / "png", sample.face, "face")
        tensorio.save_frames_png(out / str(seeds[0]) / "png", sample.scene, "scene")
    manifest.append_entry(out, "gen-data", sys.argv[1:], cfg.to_dict(),
                          {"seeds": [seeds[0], seeds[-1]] if seeds else [],
                           "frames": frames, "count": len(seeds)})
    print(f"wrote {len(seeds)} samples with {frames} frames to {out}")
    return EXIT_OK


def _make_dataset(args, cfg: RunConfig):
    if getattr(args, "train_seeds", None):
        lo, hi = (int(v) for v in args.train_seeds.split(":", 1))
        if hi <= lo:
            raise UsageError("--train-seeds must be LO:HI with HI > LO")
        return SeedDataset(cfg.world, range(lo, hi)), f"seeds {lo}:{hi}"
    if not args.data:
        raise UsageError("either --data or --train-seeds is required")
    return DirDataset(Path(args.data)), str(args.data)


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    dataset, data_desc = _make_dataset(args, cfg)
    schedule = _schedule_from(cfg)
    vm = build_variant_model(args.variant, cfg.unet_config(), **cfg.conditioning())
    if vm.ema is not None:
        vm.ema.decay = cfg.train.ema_decay
    steps = args.steps or cfg.train.steps
    batch = args.batch_size or cfg.train.batch_size
    t0 = time.time()
    losses = pipeline.train_variant(
        vm, schedule, dataset, cfg.codec, steps=steps, batch_size=batch,
        lr=cfg.train.lr, grad_clip=cfg.train.grad_clip,
        seed=args.seed if args.seed is not None else cfg.train.seed,
        log_every=cfg.train.log_every)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    tensorio.save_checkpoint(out, vm, cfg.conditioning(),
                             extra={"steps": steps, "final_loss": losses[-1]})
    manifest.append_entry(out.parent, "train", sys.argv[1:], cfg.to_dict(),
                          {"variant": args.variant, "data": data_desc,
                           "steps": steps, "batch_size": batch,
                           "final_loss": losses[-1],
                           "elapsed_s": round(time.time() - t0, 1),
                           "checkpoint": str(out)})
    print(f"trained {args.variant} for {steps} steps, "
          f"final loss {losses[-1]:.4f}, saved {out}")
    return EXIT_OK


def cmd_sample(args) -> int:
    cfg = load_config(args.config)
    schedule = _schedule_from(cfg)
    dataset = DirDataset(Path(args.data))
    indices = _parse_indices(args.indices, len(dataset))
    if args.one_stage:
        needed = ["one-stage"]
    elif args.gt_landmarks:
        needed = ["face-first", "face-seq"]
    else:
        needed = ["lmk-first", "lmk-seq", "face-first", "face-seq"]
    models = _load_models(Path(args.checkpoints), needed)
    out = Path(args.out)
    n = cfg.world.n_frames
    produced = []
    for index in indices:
        sample = dataset[index]
        gen = torch.Generator().manual_seed(1_000_003 * args.seed + sample.seed)
        if args.one_stage:
            result = pipeline.run_one_stage(models["one-stage"], schedule,
                                            cfg.codec, sample, gen)
        elif args.extend > 1:
            result = pipeline.extend_autoregressive(
                models, schedule, cfg.codec, sample, windows=args.extend,
                generator=gen, n_frames=n, gt_landmarks=args.gt_landmarks)
        else:
            result = pipeline.run_pipeline(models, schedule, cfg.codec, sample,
                                           gen, gt_landmarks=args.gt_landmarks)
        total = result["face"].shape[0]
        sample_dir = out / str(sample.seed)
        sample_dir.mkdir(parents=True, exist_ok=True)
        tensorio.save_tensor(sample_dir / "face.vt", result["face"])
        if "landmarks" in result:
            tensorio.save_tensor(sample_dir / "landmarks.vt", result["landmarks"])
        elif args.gt_landmarks:
            tensorio.save_tensor(sample_dir / "landmarks.vt",
                                 sample.landmarks[:total])
        scene = pipeline.composite(sample.scene_masked[:total],
                                   result["face"], sample.head_box)
        tensorio.save_tensor(sample_dir / "scene.vt", scene)
        meta = {"seed": sample.seed, "index": index, "frames": total,
                "mode": ("one-stage" if args.one_stage
                         else "gt-landmarks" if args.gt_landmarks else "full"),
                "windows": args.extend, "sample_seed_base": args.seed}
        (sample_dir / "meta.json").write_text(json.dumps(meta, indent=1))
        if args.png:
            tensorio.save_frames_png(sample_dir / "png", result["face"], "face")
        produced.append(sample.seed)
        if np.isnan(result["face"]).any():
            print(f"NaN frames generated for sample {sample.seed}", file=sys.stderr)
            return EXIT_NUMERIC
    manifest.append_entry(out, "sample", sys.argv[1:], cfg.to_dict(),
                          {"checkpoints": str(args.checkpoints),
                           "data": str(args.data), "samples": produced,
                           "mode": ("one-stage" if args.one_stage else
                                    "gt-landmarks" if args.gt_landmarks else "full"),
                           "windows": args.extend})
    print(f"sampled {len(produced)} clips to {out}")
    return EXIT_OK


METRIC_CHOICES = ("fc", "sync", "fid", "orient")


def _eval_pairs(real_root: Path, gen_root: Path):
    gen_dirs = sorted((p for p in Path(gen_root).iterdir()
                       if (p / "face.vt").exists()),
                      key=lambda p: p.name)
    if not gen_dirs:
        raise DataError(f"no generated samples under {gen_root}")
    pairs = []
    for gdir in gen_dirs:
        rdir = Path(real_root) / gdir.name
        if not (rdir / "sample.json").exists():
            raise DataError(f"no matching real sample for {gdir.name} in {real_root}")
        pairs.append((rdir, gdir))
    return pairs


def cmd_eval(args) -> int:
    cfg = load_config(args.config)
    which = tuple(m.strip() for m in args.metrics.split(",") if m.strip())
    bad = set(which) - set(METRIC_CHOICES)
    if bad:
        raise UsageError(f"unknown metrics {sorted(bad)}; choose from {METRIC_CHOICES}")
    embedder = metrics.FixedEmbedder(cfg.eval.embedder_dim, cfg.eval.embedder_seed)
    pairs = _eval_pairs(Path(args.real), Path(args.gen))

    rows: List[Dict] = []
    real_faces, gen_faces, real_scenes, gen_scenes = [], [], [], []
    for rdir, gdir in pairs:
        meta = json.loads((rdir / "sample.json").read_text())
        face = tensorio.load_tensor(gdir / "face.vt")
        row: Dict = {"seed": gdir.name, "side": meta["side"]}
        if "fc" in which:
            row["frame_consistency"] = metrics.frame_consistency(face, embedder)
        if "sync" in which:
            env = np.asarray(meta["envelope"])[:face.shape[0]]
            try:
                row["sync"] = metrics.sync_score(face, env, kind="face")
            except metrics.MetricError as exc:
                row["sync"] = None
                row["sync_error"] = str(exc)
        if "orient" in which:
            lmk_path = gdir / "landmarks.vt"
            video = (tensorio.load_tensor(lmk_path) if lmk_path.exists() else face)
            kind = "landmarks" if lmk_path.exists() else "face"
            try:
                row["yaw_estimate"] = metrics.estimate_yaw(video, kind)
                row["orient_hit"] = int(np.sign(row["yaw_estimate"]) == meta["side"])
            except metrics.MetricError as exc:
                row["yaw_estimate"] = None
                row["orient_error"] = str(exc)
        if "fid" in which:
            gen_faces.append(face)
            real_faces.append(tensorio.load_tensor(rdir / "face.vt"))
            rs, gs = rdir / "scene.vt", gdir / "scene.vt"
            if rs.exists() and gs.exists():
                real_scenes.append(tensorio.load_tensor(rs))
                gen_scenes.append(tensorio.load_tensor(gs))
        rows.append(row)

    summary: Dict = {}
    if "fc" in which:
        vals = [r["frame_consistency"] for r in rows]
        summary["frame_consistency"] = {"mean": float(np.mean(vals)),
                                        "values": vals}
    if "sync" in which:
        vals = [r["sync"] for r in rows if r.get("sync") is not None]
        summary["sync"] = {"mean": float(np.mean(vals)) if vals else float("nan"),
                           "values": vals,
                           "failed": sum(1 for r in rows if r.get("sync") is None)}
    if "orient" in which:
        hits = [r["orient_hit"] for r in rows if "orient_hit" in r]
        summary["orientation"] = (sum(hits) / len(hits)) if hits else float("nan")
    if "fid" in which:
        summary["fid_face"] = metrics.fid_proxy(real_faces, gen_faces, embedder)
        if real_scenes:
            summary["fid_scene"] = metrics.fid_proxy(real_scenes, gen_scenes,
                                                     embedder)

    report = {"real": str(args.real), "gen": str(args.gen),
              "metrics": summary, "samples": rows}
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(json.dumps(report, indent=1))

    columns = ["seed", "side", "frame_consistency", "sync", "yaw_estimate",
               "orient_hit"]
    with (out / "report.csv").open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns, extrasaction="ignore")
        writer.writeheader()
        writer.writerows(rows)
    made = figures.save_report_figures(report, out)
    manifest.append_entry(out, "eval", sys.argv[1:], cfg.to_dict(),
                          {"real": str(args.real), "gen": str(args.gen),
                           "metrics": {k: (v if not isinstance(v, dict)
                                           else v.get("mean"))
                                       for k, v in summary.items()},
                           "figures": [str(p) for p in made]})

    scalars = [v if not isinstance(v, dict) else v.get("mean")
               for v in summary.values()]
    print(json.dumps({k: (v if not isinstance(v, dict) else v.get("mean"))
                      for k, v in summary.items()}, indent=1))
    if any(isinstance(v, float) and math.isnan(v) for v in scalars):
        print("numeric failure: NaN in metric summary", file=sys.stderr)
        return EXIT_NUMERIC
    print(f"report written to {out}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from . import gradcheck as gc
    ok, results = gc.run_suite(args.module, tol=args.tol)
    width = max(len(name) for name, _ in results)
    for name, err in results:
        flag = "ok" if err <= args.tol else "FAIL"
        print(f"{name:<{width}}  rel_err={err:.3e}  {flag}")
    print(f"gradcheck {args.module}: {'PASS' if ok else 'FAIL'} "
          f"({len(results)} checks, tol {args.tol:g})")
    return EXIT_OK if ok else EXIT_NUMERIC


# ---------------------------------------------------------------- parser


def build_parser() -> _Parser:
    parser = _Parser(prog="scenetalk",
                     description="Audio-driven talking-face toy pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a procedural dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--num", type=int, default=16)
    p.add_argument("--seed-start", type=int, default=0)
    p.add_argument("--frames", type=int, default=None,
                   help="frames per sample (default: config n_frames)")
    p.add_argument("--config", default=None)
    p.add_argument("--png", action="store_true")
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="train one model variant")
    p.add_argument("--variant", required=True, choices=VARIANTS)
    p.add_argument("--data", default=None, help="dataset directory")
    p.add_argument("--train-seeds", default=None,
                   help="LO:HI to synthesize training data on the fly")
    p.add_argument("--out", required=True, help="checkpoint file to write")
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--config", default=None)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("sample", help="generate clips from checkpoints")
    p.add_argument("--checkpoints", required=True,
                   help="directory with <variant>.ckpt files")
    p.add_argument("--data", required=True,
                   help="dataset directory providing the conditions")
    p.add_argument("--out", required=True)
    p.add_argument("--indices", default="0:1",
                   help="dataset indices: 'A:B', 'i,j,k' or 'i'")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--gt-landmarks", action="store_true",
                   help="drive stage 2 with ground-truth landmarks")
    p.add_argument("--one-stage", action="store_true",
                   help="use the single-stage ablation model")
    p.add_argument("--extend", type=int, default=1, metavar="K",
                   help="autoregressive windows (1 + K*(N-1) frames)")
    p.add_argument("--png", action="store_true")
    p.add_argument("--config", default=None)
    p.set_defaults(fn=cmd_sample)

    p = sub.add_parser("eval", help="score generated clips against a dataset")
    p.add_argument("--real", required=True)
    p.add_argument("--gen", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--metrics", default="fc,sync,fid,orient")
    p.add_argument("--config", default=None)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient audit")
    p.add_argument("--module", required=True,
                   choices=("kernels", "model", "pipeline"))
    p.add_argument("--tol", type=float, default=1e-3)
    p.set_defaults(fn=cmd_gradcheck)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.fn(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, ConfigError, FileNotFoundError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except FloatingPointError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
