"""Binary tensor files and model checkpoints.

Tensor files carry a single float32 array: an 8-byte magic, a version, a
dtype code, the rank, the dims (all little-endian u32) and then the
row-major payload.  Checkpoints bundle a JSON header (variant name, model
config, array manifest) with the concatenated payloads of every weight.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import TYPE_CHECKING, Dict, Optional, Tuple

import numpy as np
import torch

if TYPE_CHECKING:
    from .model import VariantModel

TENSOR_MAGIC = b"VIDTENSR"
TENSOR_VERSION = 1
DTYPE_F32 = 1

CKPT_MAGIC = b"VDCKPT01"


class DataError(Exception):
    """A file or directory is missing, truncated or malformed."""


def save_tensor(path: Path, array: np.ndarray) -> None:
    arr = np.asarray(array, dtype=np.float32)
    if arr.ndim:
        # ascontiguousarray would silently promote rank 0 to rank 1
        arr = np.ascontiguousarray(arr)
    header = TENSOR_MAGIC + struct.pack(
        "<III", TENSOR_VERSION, DTYPE_F32, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    Path(path).write_bytes(header + arr.astype("<f4").tobytes())


def load_tensor(path: Path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise DataError(f"tensor file {path} does not exist")
    blob = path.read_bytes()
    if len(blob) < 20 or blob[:8] != TENSOR_MAGIC:
        raise DataError(f"{path} is not a tensor file (bad magic)")
    version, dtype, rank = struct.unpack("<III", blob[8:20])
    if version != TENSOR_VERSION:
        raise DataError(f"{path}: unsupported tensor version {version}")
    if dtype != DTYPE_F32:
        raise DataError(f"{path}: unsupported dtype code {dtype}")
    offset = 20 + 4 * rank
    if len(blob) < offset:
        raise DataError(f"{path} is truncated")
    shape = struct.unpack(f"<{rank}I", blob[20:offset])
    count = int(np.prod(shape)) if rank else 1
    payload = blob[offset:]
    if len(payload) != 4 * count:
        raise DataError(
            f"{path}: payload holds {len(payload) // 4} values, header says {count}")
    return np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float32)


def save_checkpoint(path: Path, variant_model: "VariantModel",
                    conditioning: Dict[str, int],
                    extra: Optional[Dict] = None) -> None:
    from dataclasses import asdict
    model = variant_model.model
    named: Dict[str, torch.Tensor] = {
        f"model.{k}": v for k, v in model.state_dict().items()}
    if variant_model.ema is not None:
        named.update({f"ema.{k}": v for k, v in variant_model.ema.state_dict().items()})
    manifest = []
    payload = bytearray()
    for name, tensor in named.items():
        arr = tensor.detach().cpu().numpy().astype("<f4")
        manifest.append({"name": name, "shape": list(arr.shape)})
        payload += arr.tobytes()
    header = {
        "variant": variant_model.spec.name,
        "config": asdict(model.cfg),
        "conditioning": dict(conditioning),
        "ema_decay": variant_model.ema.decay if variant_model.ema else None,
        "arrays": manifest,
        "extra": extra or {},
    }
    blob = json.dumps(header).encode()
    Path(path).write_bytes(
        CKPT_MAGIC + struct.pack("<I", len(blob)) + blob + bytes(payload))


def load_checkpoint(path: Path) -> Tuple["VariantModel", Dict]:
    """Rebuilds a VariantModel (weights and EMA) from a checkpoint file."""
    from .model import UNetConfig, build_variant_model
    path = Path(path)
    if not path.exists():
        raise DataError(f"checkpoint {path} does not exist")
    blob = path.read_bytes()
    if len(blob) < 12 or blob[:8] != CKPT_MAGIC:
        raise DataError(f"{path} is not a checkpoint file (bad magic)")
    (hlen,) = struct.unpack("<I", blob[8:12])
    if len(blob) < 12 + hlen:
        raise DataError(f"{path} is truncated")
    header = json.loads(blob[12:12 + hlen].decode())
    cfg_dict = dict(header["config"])
    for key in ("channel_mult", "attention_scales", "cross_attention_scales"):
        cfg_dict[key] = tuple(cfg_dict[key])
    cfg = UNetConfig(**cfg_dict)
    cond = header["conditioning"]
    vm = build_variant_model(header["variant"], cfg,
                             audio_dim=cond["audio_dim"],
                             identity_dim=cond["identity_dim"],
                             lip_channels=cond["lip_channels"],
                             with_ema=header.get("ema_decay") is not None)
    if vm.ema is not None and header.get("ema_decay"):
        vm.ema.decay = float(header["ema_decay"])

    offset = 12 + hlen
    arrays: Dict[str, torch.Tensor] = {}
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        end = offset + 4 * count
        if end > len(blob):
            raise DataError(f"{path}: weight payload truncated at {entry['name']}")
        arr = np.frombuffer(blob[offset:end], dtype="<f4").reshape(shape)
        arrays[entry["name"]] = torch.from_numpy(arr.copy())
        offset = end
    model_state = {k[len("model."):]: v for k, v in arrays.items()
                   if k.startswith("model.")}
    vm.model.load_state_dict(model_state)
    if vm.ema is not None:
        ema_state = {k[len("ema."):]: v for k, v in arrays.items()
                     if k.startswith("ema.")}
        if ema_state:
            vm.ema.load_state_dict(ema_state)
    return vm, header


def save_frames_png(directory: Path, video: np.ndarray, prefix: str = "frame") -> None:
    """Writes each [3,H,W] frame of a clip as a PNG, for eyeballing."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt  # noqa: F401  (registers the backend)
    from matplotlib.image import imsave
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    video = np.asarray(video)
    if video.ndim != 4 or video.shape[1] != 3:
        raise DataError(f"expected an [N,3,H,W] video, got {video.shape}")
    for i, frame in enumerate(video):
        imsave(directory / f"{prefix}_{i:03d}.png",
               np.clip(frame.transpose(1, 2, 0), 0.0, 1.0))
