"""Procedural talking-head world for training and evaluating the pipeline.

Every sample is a pure function of (config, seed): a short clip of a
cartoon face whose mouth opening follows a speech-like loudness envelope,
whose gaze direction matches an audience marker in the surrounding scene,
and whose geometry is set by a per-seed identity vector.  The renderer is
anti-aliased so mouth openings can be measured back to subpixel precision,
which is what makes the audio-sync metric trustworthy on ground truth.

Conventions: images are float32 arrays in [0, 1], channel-first.  The face
crop is ``[3, S, S]``, the scene ``[3, Sc, Sc]`` with the face pasted into a
fixed head box, and the landmark video encodes dot groups by channel:
red = head outline, green = eyes, blue = mouth.
"""

from __future__ import annotations

import colorsys
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

# Fixed filterbank endpoints for the audio features: channel k responds to
# loudness e as g0_k + e * (g1_k - g0_k), plus noise.
def _profiles(dim: int) -> Tuple[np.ndarray, np.ndarray]:
    g1 = np.linspace(0.0, 1.0, dim)
    return 1.0 - g1, g1


@dataclass(frozen=True)
class WorldConfig:
    face_size: int = 32
    scene_size: int = 64
    n_frames: int = 8
    audio_dim: int = 8
    fps: int = 25
    lip_rows: int = 8
    yaw_jitter: float = 0.0
    envelope_floor: float = 0.12
    audio_noise: float = 0.02

    def __post_init__(self):
        if self.scene_size % self.face_size:
            raise ValueError("scene_size must be a multiple of face_size")

    @property
    def context_factor(self) -> int:
        return self.scene_size // self.face_size

    @property
    def head_box(self) -> Tuple[int, int, int, int]:
        """(y0, x0, h, w) of the face crop inside the scene."""
        y0 = round(0.0625 * self.scene_size)
        x0 = (self.scene_size - self.face_size) // 2
        return (y0, x0, self.face_size, self.face_size)


@dataclass(frozen=True)
class IdentityParams:
    """Per-speaker geometry, all lengths as fractions of the face size."""

    aspect: float        # head width / height
    hue: float           # skin tone knob in [0, 1], mapped away from red
    eye_spacing: float   # distance between eye centres
    mouth_base: float    # mouth opening at zero loudness
    mouth_gain: float    # opening added per unit loudness
    mouth_width: float

    @staticmethod
    def random(rng: np.random.Generator) -> "IdentityParams":
        return IdentityParams(
            aspect=float(rng.uniform(0.78, 0.95)),
            hue=float(rng.uniform(0.0, 1.0)),
            eye_spacing=float(rng.uniform(0.22, 0.34)),
            # Gain dominates base so the audio-driven part of the mouth is
            # the largest moving signal in the frame; the max opening
            # (base + gain) stays above the eye row and inside the frame.
            mouth_base=float(rng.uniform(0.0625, 0.094)),
            mouth_gain=float(rng.uniform(0.30, 0.42)),
            mouth_width=float(rng.uniform(0.28, 0.40)),
        )

    def vector(self) -> np.ndarray:
        return np.array([self.aspect, self.hue, self.eye_spacing,
                         self.mouth_base, self.mouth_gain, self.mouth_width],
                        dtype=np.float32)

    @staticmethod
    def from_vector(v: Sequence[float]) -> "IdentityParams":
        a, h, e, mb, mg, mw = (float(x) for x in v)
        return IdentityParams(a, h, e, mb, mg, mw)

    def skin_rgb(self) -> Tuple[float, float, float]:
        # Hues from green through blue only, so mouth redness stays unique.
        return colorsys.hsv_to_rgb(0.30 + 0.35 * self.hue, 0.45, 0.85)


IDENTITY_DIM = 6


@dataclass
class SynthSample:
    """One generated clip with every intermediate the pipeline can consume."""

    seed: int
    face: np.ndarray          # [N, 3, S, S]
    landmarks: np.ndarray     # [N, 3, S, S]
    scene: np.ndarray         # [N, 3, Sc, Sc], face composited in
    scene_masked: np.ndarray  # [N, 3, Sc, Sc], head box zeroed
    context: np.ndarray       # [N, 3, S, S], masked scene average-pooled
    lip: np.ndarray           # [N, 1, lip_rows, S]
    audio: np.ndarray         # [N, audio_dim]
    portrait: np.ndarray      # [3, S, S], neutral identity reference
    envelope: np.ndarray      # [N]
    mouth_opening: np.ndarray  # [N], pixels
    yaw: np.ndarray           # [N]
    side: int                 # +1 audience right, -1 audience left
    identity: IdentityParams = field(repr=False)
    head_box: Tuple[int, int, int, int] = (0, 0, 0, 0)


def gen_envelope(rng: np.random.Generator, n_frames: int,
                 floor: float = 0.12) -> np.ndarray:
    """Smoothed reflected random walk in [0, 1] with a variance floor.

    Redraws up to 50 times until the standard deviation reaches ``floor``
    (an almost-flat envelope would make sync correlation meaningless) and
    keeps the best attempt otherwise.
    """
    best = None
    best_std = -1.0
    for _ in range(50):
        e = np.empty(n_frames)
        e[0] = rng.uniform(0.2, 0.8)
        for i in range(1, n_frames):
            step = rng.normal(0.0, 0.28)
            v = e[i - 1] + step
            # reflect into the open interval
            while v < 0.02 or v > 0.98:
                v = 0.04 - v if v < 0.02 else 1.96 - v
            e[i] = v
        if n_frames >= 3:
            padded = np.concatenate(([e[0]], e, [e[-1]]))
            e = 0.25 * padded[:-2] + 0.5 * padded[1:-1] + 0.25 * padded[2:]
        std = float(e.std())
        if std > best_std:
            best, best_std = e, std
        if std >= floor:
            break
    return best.astype(np.float64)


def audio_features(envelope: np.ndarray, rng: np.random.Generator,
                   dim: int = 8, noise: float = 0.02) -> np.ndarray:
    """Filterbank-style features, affine in the envelope plus small noise."""
    g0, g1 = _profiles(dim)
    feats = g0[None, :] + envelope[:, None] * (g1 - g0)[None, :]
    feats = feats + noise * rng.standard_normal(feats.shape)
    return feats.astype(np.float32)


def audio_regression_weights(dim: int = 8) -> np.ndarray:
    """Weights w* with features @ w* = envelope + const in the noise-free case."""
    g0, g1 = _profiles(dim)
    d = g1 - g0
    return (d / float(d @ d)).astype(np.float64)


def _ellipse_alpha(size: int, cy: float, cx: float, ry: float, rx: float) -> np.ndarray:
    """Anti-aliased ellipse coverage with the 0.5 level exactly on the boundary."""
    y = np.arange(size)[:, None]
    x = np.arange(size)[None, :]
    r = np.sqrt(((y - cy) / ry) ** 2 + ((x - cx) / rx) ** 2)
    edge = 1.0 / min(ry, rx)  # approx. one-pixel transition band
    return np.clip(0.5 + (1.0 - r) / edge * 0.5, 0.0, 1.0)


def _blend(img: np.ndarray, alpha: np.ndarray, rgb: Sequence[float]) -> None:
    for c in range(3):
        img[c] = img[c] * (1.0 - alpha) + rgb[c] * alpha


def _splat_dots(size: int, points: List[Tuple[float, float]]) -> np.ndarray:
    """Bilinear point splat followed by a 3x3 box, preserving centroids."""
    acc = np.zeros((size + 2, size + 2))
    for (py, px) in points:
        y0, x0 = int(math.floor(py)), int(math.floor(px))
        fy, fx = py - y0, px - x0
        for dy, wy in ((0, 1.0 - fy), (1, fy)):
            for dx, wx in ((0, 1.0 - fx), (1, fx)):
                yy, xx = y0 + dy + 1, x0 + dx + 1
                if 0 <= yy < size + 2 and 0 <= xx < size + 2:
                    acc[yy, xx] += wy * wx
    out = np.zeros((size, size))
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            out += acc[1 + dy:size + 1 + dy, 1 + dx:size + 1 + dx]
    return np.clip(out, 0.0, 1.0)


def _face_geometry(cfg: WorldConfig, identity: IdentityParams, env: float,
                   yaw: float) -> Dict[str, object]:
    s = cfg.face_size
    cx = (s - 1) / 2.0
    head_cy, head_ry = 0.5 * s, 0.39 * s
    head_rx = head_ry * identity.aspect
    shift = 0.125 * s * yaw
    eye_y = 0.375 * s
    eye_dx = identity.eye_spacing * s / 2.0
    mouth_y = 0.672 * s
    mouth_x = cx + shift
    opening = (identity.mouth_base + identity.mouth_gain * env) * s
    mouth_rx = identity.mouth_width * s / 2.0
    return {
        "head": (head_cy, cx, head_ry, head_rx),
        "eyes": [(eye_y, cx - eye_dx + shift), (eye_y, cx + eye_dx + shift)],
        "mouth": (mouth_y, mouth_x, opening / 2.0, mouth_rx),
        "opening": opening,
    }


def render_face(cfg: WorldConfig, identity: IdentityParams, env: float,
                yaw: float) -> Tuple[np.ndarray, np.ndarray]:
    """Renders one face frame and its landmark frame."""
    s = cfg.face_size
    geo = _face_geometry(cfg, identity, env, yaw)
    face = np.empty((3, s, s))
    for c, v in enumerate((0.08, 0.09, 0.11)):
        face[c] = v
    hy, hx, hry, hrx = geo["head"]
    _blend(face, _ellipse_alpha(s, hy, hx, hry, hrx), identity.skin_rgb())
    eye_r = 0.04 * s
    for (ey, ex) in geo["eyes"]:
        _blend(face, _ellipse_alpha(s, ey, ex, eye_r, eye_r), (0.06, 0.06, 0.09))
    my, mx, mry, mrx = geo["mouth"]
    _blend(face, _ellipse_alpha(s, my, mx, mry, mrx), (0.95, 0.09, 0.11))

    lmk = np.zeros((3, s, s))
    oval_pts = []
    for k in range(6):
        th = math.radians(-90.0 + 60.0 * k)
        oval_pts.append((hy + hry * math.sin(th), hx + hrx * math.cos(th)))
    mouth_pts = [(my - mry, mx), (my + mry, mx), (my, mx - mrx), (my, mx + mrx)]
    lmk[0] = _splat_dots(s, oval_pts)
    lmk[1] = _splat_dots(s, geo["eyes"])
    lmk[2] = _splat_dots(s, mouth_pts)
    return face.astype(np.float32), lmk.astype(np.float32)


def _scene_background(cfg: WorldConfig, rng: np.random.Generator,
                      n_frames: int) -> np.ndarray:
    sc = cfg.scene_size
    y = np.arange(sc)[:, None] / sc
    x = np.arange(sc)[None, :] / sc
    phases = rng.uniform(0.0, 1.0, size=3)
    waves = rng.uniform(1.0, 2.0, size=(3, 2))
    drift = rng.uniform(-0.03, 0.03, size=3)
    frames = np.empty((n_frames, 3, sc, sc))
    for f in range(n_frames):
        for c in range(3):
            ph = 2.0 * math.pi * (phases[c] + drift[c] * f)
            frames[f, c] = 0.45 + 0.25 * np.sin(
                2.0 * math.pi * (waves[c, 0] * x + waves[c, 1] * y) + ph)
    return np.clip(frames, 0.0, 1.0)


def _draw_marker(scene: np.ndarray, cfg: WorldConfig, side: int) -> None:
    sc = cfg.scene_size
    x0 = sc - 6 if side > 0 else 3
    y0, y1 = round(0.33 * sc), round(0.67 * sc)
    for c, v in enumerate((0.95, 0.85, 0.30)):
        scene[:, c, y0:y1, x0:x0 + 3] = v


def _lip_rows(cfg: WorldConfig) -> Tuple[int, int]:
    mouth_y = 0.672 * cfg.face_size
    y0 = int(math.floor(mouth_y)) - cfg.lip_rows // 2 + 1
    return y0, y0 + cfg.lip_rows


def redness(img: np.ndarray) -> np.ndarray:
    """R minus the larger of G and B, clipped to [0, 1]; isolates the mouth."""
    return np.clip(img[..., 0, :, :] - np.maximum(img[..., 1, :, :],
                                                  img[..., 2, :, :]), 0.0, 1.0)


def average_pool(video: np.ndarray, factor: int) -> np.ndarray:
    """Non-overlapping mean pooling over the last two axes."""
    if factor == 1:
        return video.copy()
    *lead, h, w = video.shape
    v = video.reshape(*lead, h // factor, factor, w // factor, factor)
    return v.mean(axis=(-3, -1))


def gen_sample(cfg: WorldConfig, seed: int,
               n_frames: Optional[int] = None) -> SynthSample:
    """Deterministically generates the full sample for one seed."""
    n = n_frames or cfg.n_frames
    rng = np.random.default_rng(seed)
    identity = IdentityParams.random(rng)
    side = 1 if rng.random() < 0.5 else -1
    yaw_mag = rng.uniform(0.6, 1.0)
    env = gen_envelope(rng, n, cfg.envelope_floor)
    audio = audio_features(env, rng, cfg.audio_dim, cfg.audio_noise)
    yaw = side * yaw_mag + cfg.yaw_jitter * rng.standard_normal(n)

    s = cfg.face_size
    faces = np.empty((n, 3, s, s), dtype=np.float32)
    lmks = np.empty((n, 3, s, s), dtype=np.float32)
    openings = np.empty(n)
    for i in range(n):
        faces[i], lmks[i] = render_face(cfg, identity, float(env[i]), float(yaw[i]))
        openings[i] = (identity.mouth_base + identity.mouth_gain * env[i]) * s

    scene = _scene_background(cfg, rng, n).astype(np.float32)
    _draw_marker(scene, cfg, side)
    y0, x0, bh, bw = cfg.head_box
    scene_full = scene.copy()
    scene_full[:, :, y0:y0 + bh, x0:x0 + bw] = faces
    scene_masked = scene.copy()
    scene_masked[:, :, y0:y0 + bh, x0:x0 + bw] = 0.0
    context = average_pool(scene_masked, cfg.context_factor).astype(np.float32)

    r0, r1 = _lip_rows(cfg)
    lip = redness(faces)[:, None, r0:r1, :].astype(np.float32)
    portrait, _ = render_face(cfg, identity, 0.35, 0.0)

    return SynthSample(
        seed=seed, face=faces, landmarks=lmks, scene=scene_full,
        scene_masked=scene_masked, context=context, lip=lip, audio=audio,
        portrait=portrait, envelope=env, mouth_opening=openings, yaw=yaw,
        side=side, identity=identity, head_box=cfg.head_box)


class SeedDataset:
    """Maps an index straight to gen_sample(cfg, seeds[i]); nothing on disk."""

    def __init__(self, cfg: WorldConfig, seeds: Sequence[int]):
        self.cfg = cfg
        self.seeds = list(seeds)

    def __len__(self) -> int:
        return len(self.seeds)

    def __getitem__(self, i: int) -> SynthSample:
        return gen_sample(self.cfg, self.seeds[i])


class DirDataset:
    """Reads samples previously written by save_sample, ordered by seed."""

    def __init__(self, root: Path):
        from . import tensorio  # local import to avoid a cycle at module load
        self._tensorio = tensorio
        self.root = Path(root)
        if not self.root.is_dir():
            raise FileNotFoundError(f"dataset directory {self.root} does not exist")
        self.sample_dirs = sorted(
            (p for p in self.root.iterdir() if (p / "sample.json").exists()),
            key=lambda p: int(p.name))
        if not self.sample_dirs:
            raise FileNotFoundError(f"no samples found under {self.root}")

    def __len__(self) -> int:
        return len(self.sample_dirs)

    def __getitem__(self, i: int) -> SynthSample:
        return load_sample(self.sample_dirs[i])


def save_sample(directory: Path, sample: SynthSample) -> None:
    from . import tensorio
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name in ("face", "landmarks", "scene", "scene_masked", "context",
                 "lip", "audio", "portrait"):
        tensorio.save_tensor(directory / f"{name}.vt", getattr(sample, name))
    meta = {
        "seed": sample.seed,
        "envelope": [float(v) for v in sample.envelope],
        "mouth_opening": [float(v) for v in sample.mouth_opening],
        "yaw": [float(v) for v in sample.yaw],
        "side": sample.side,
        "identity": [float(v) for v in sample.identity.vector()],
        "head_box": list(sample.head_box),
    }
    (directory / "sample.json").write_text(json.dumps(meta, indent=1))


def load_sample(directory: Path) -> SynthSample:
    from . import tensorio
    directory = Path(directory)
    meta = json.loads((directory / "sample.json").read_text())
    arrays = {name: tensorio.load_tensor(directory / f"{name}.vt")
              for name in ("face", "landmarks", "scene", "scene_masked",
                           "context", "lip", "audio", "portrait")}
    return SynthSample(
        seed=int(meta["seed"]),
        envelope=np.asarray(meta["envelope"], dtype=np.float64),
        mouth_opening=np.asarray(meta["mouth_opening"], dtype=np.float64),
        yaw=np.asarray(meta["yaw"], dtype=np.float64),
        side=int(meta["side"]),
        identity=IdentityParams.from_vector(meta["identity"]),
        head_box=tuple(int(v) for v in meta["head_box"]),
        **arrays)
