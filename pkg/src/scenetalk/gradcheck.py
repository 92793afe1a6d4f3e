"""Central finite-difference verification of analytic gradients.

The training code trusts autograd; this module is the independent route.
Every suite builds a small float64 problem, randomizes all parameters so no
zero-initialized path hides a wiring bug, compares backprop gradients with
central differences coordinate by coordinate, and reports the worst
relative error per tensor.
"""

from __future__ import annotations

from typing import Callable, Dict, List, Optional, Tuple

import torch

from .blocks import (BasicBlock, FrameCrossAttention, SpatialSelfAttention,
                     SpatioTemporalConv, TemporalSelfAttention,
                     TimestepEmbedding)
from .model import UNetConfig, build_variant_model, diffusion_loss
from .schedule import build_linear_schedule

DEFAULT_EPS = 1e-5
DEFAULT_TOL = 1e-3


def _rel_err(a: float, b: float, floor: float = 1e-8) -> float:
    # Central differences cannot resolve slopes below ~|loss|*2^-52/eps
    # (~1e-9 for these suites), and autograd leaves ~1e-16 cancellation
    # residue on structurally zero gradients such as attention key biases,
    # which shift every softmax logit equally.  Below the floor both routes
    # are numerical zeros; comparing them would report errors near 1.
    scale = max(abs(a), abs(b))
    if scale < floor:
        return 0.0
    return abs(a - b) / scale


def finite_difference_check(loss_fn: Callable[[], torch.Tensor],
                            params: Dict[str, torch.Tensor],
                            eps: float = DEFAULT_EPS,
                            max_coords: Optional[int] = None,
                            seed: int = 0) -> Dict[str, float]:
    """Max relative error between backprop and central differences.

    Args:
        loss_fn: closure evaluating the scalar loss from current params.
        params: named tensors with requires_grad set.
        eps: half step for central differences.
        max_coords: cap on checked coordinates per tensor; all when None.
        seed: seed for picking the coordinate subset.

    Returns:
        Mapping name -> worst relative error over the checked coordinates.
    """
    for p in params.values():
        if p.grad is not None:
            p.grad = None
    loss = loss_fn()
    loss.backward()
    gen = torch.Generator().manual_seed(seed)
    report: Dict[str, float] = {}
    for name, p in params.items():
        grad = p.grad
        if grad is None:
            grad = torch.zeros_like(p)
        flat = p.detach().reshape(-1)
        n = flat.numel()
        if max_coords is not None and n > max_coords:
            coords = torch.randperm(n, generator=gen)[:max_coords].tolist()
        else:
            coords = range(n)
        worst = 0.0
        gflat = grad.reshape(-1)
        with torch.no_grad():
            for i in coords:
                orig = flat[i].item()
                flat[i] = orig + eps
                hi = float(loss_fn())
                flat[i] = orig - eps
                lo = float(loss_fn())
                flat[i] = orig
                fd = (hi - lo) / (2.0 * eps)
                worst = max(worst, _rel_err(fd, float(gflat[i])))
        report[name] = worst
    return report


def _randomize(module: torch.nn.Module, scale: float = 0.05, seed: int = 1) -> None:
    """Adds seeded noise to every parameter so zero-init paths carry signal."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            p.add_(scale * torch.randn(p.shape, generator=gen, dtype=p.dtype))


def _scalarize(out: torch.Tensor, seed: int = 2) -> torch.Tensor:
    """Fixed random projection of a tensor to a scalar."""
    gen = torch.Generator().manual_seed(seed)
    w = torch.randn(out.shape, generator=gen, dtype=out.dtype)
    return (out * w).sum()


def _named_params(module: torch.nn.Module, extra: Dict[str, torch.Tensor]
                  ) -> Dict[str, torch.Tensor]:
    params = {n: p for n, p in module.named_parameters()}
    params.update(extra)
    for p in params.values():
        p.requires_grad_(True)
    return params


CheckResult = List[Tuple[str, float]]


def check_kernels(eps: float = DEFAULT_EPS,
                  max_coords: Optional[int] = None) -> CheckResult:
    """FD check of each neural kernel in isolation, float64, tiny shapes."""
    torch.manual_seed(0)
    results: CheckResult = []

    def run(tag: str, module: torch.nn.Module, fn: Callable[[], torch.Tensor],
            inputs: Dict[str, torch.Tensor]) -> None:
        _randomize(module)
        report = finite_difference_check(fn, _named_params(module, inputs),
                                         eps=eps, max_coords=max_coords)
        for name, err in report.items():
            results.append((f"{tag}.{name}", err))

    x = torch.randn(2, 3, 4, 5, 5, dtype=torch.float64)
    conv = SpatioTemporalConv(4, 4).double()
    run("st_conv", conv, lambda: _scalarize(conv(x)), {"input": x})

    xa = torch.randn(1, 2, 4, 4, 4, dtype=torch.float64)
    sattn = SpatialSelfAttention(4, head_dim=2).double()
    run("spatial_attn", sattn, lambda: _scalarize(sattn(xa)), {"input": xa})

    tattn = TemporalSelfAttention(4, head_dim=2).double()
    run("temporal_attn", tattn, lambda: _scalarize(tattn(xa)), {"input": xa})

    cond = torch.randn(1, 2, 3, 6, dtype=torch.float64)
    cattn = FrameCrossAttention(4, 6, head_dim=2).double()
    run("cross_attn", cattn, lambda: _scalarize(cattn(xa, cond)),
        {"input": xa, "cond": cond})

    temb_mod = TimestepEmbedding(8).double()
    tvec = torch.tensor([3, 7])
    run("time_embed", temb_mod, lambda: _scalarize(temb_mod(tvec)), {})

    xb = torch.randn(1, 2, 4, 4, 4, dtype=torch.float64)
    temb = torch.randn(1, 8, dtype=torch.float64)
    block = BasicBlock(4, 6, 8, cond_dim=6, head_dim=2, spatial_attn=True,
                       temporal_attn=True, dropout=0.0).double()
    run("basic_block", block, lambda: _scalarize(block(xb, temb, cond)),
        {"input": xb, "temb": temb, "cond": cond})
    return results


def _micro_variant(name: str):
    torch.manual_seed(0)  # isolate the suite from the caller's RNG state
    cfg = UNetConfig(in_channels=4, cv_channels=4, base_channels=4,
                     channel_mult=(1, 2), blocks_per_scale=1,
                     attention_scales=(1, 2), cross_attention_scales=(1, 2),
                     cond_embed_dim=6, head_dim=2, time_embed_dim=8,
                     dropout=0.0)
    vm = build_variant_model(name, cfg, audio_dim=3, identity_dim=6,
                             lip_channels=1, with_ema=False)
    vm.model.double().eval()
    _randomize(vm.model)
    return vm


def _variant_loss(vm, n_frames: int, pinned: bool) -> Callable[[], torch.Tensor]:
    torch.manual_seed(3)
    x0 = torch.randn(1, n_frames, 4, 8, 8, dtype=torch.float64)
    c_v = torch.randn(1, n_frames, 4, 8, 8, dtype=torch.float64)
    eps_fixed = torch.randn(x0.shape, dtype=torch.float64)
    t_fixed = torch.tensor([5])
    raw = {"audio": torch.randn(1, n_frames, 3, dtype=torch.float64),
           "identity": torch.randn(1, 6, dtype=torch.float64),
           "lip": torch.randn(1, n_frames, 1, 4, 8, dtype=torch.float64)}
    raw = {k: v for k, v in raw.items() if k in vm.spec.modalities}
    schedule = build_linear_schedule(10, 1e-3, 0.05)

    def loss_fn() -> torch.Tensor:
        bundle = vm.model.encode_conditions(raw, n_frames)
        return diffusion_loss(vm.model, schedule, x0, bundle, c_v,
                              pinned_first=pinned, t_override=t_fixed,
                              eps_override=eps_fixed)

    return loss_fn


def check_model(eps: float = DEFAULT_EPS, max_coords: int = 4) -> CheckResult:
    """FD check of the full two-branch denoiser through the diffusion loss."""
    vm = _micro_variant("lmk-first")
    loss_fn = _variant_loss(vm, n_frames=2, pinned=False)
    report = finite_difference_check(
        loss_fn, _named_params(vm.model, {}), eps=eps, max_coords=max_coords)
    return sorted(report.items())


def check_pipeline(eps: float = DEFAULT_EPS, max_coords: int = 4) -> CheckResult:
    """FD check of the pinned-first sequence objective end to end."""
    vm = _micro_variant("face-seq")
    loss_fn = _variant_loss(vm, n_frames=3, pinned=True)
    report = finite_difference_check(
        loss_fn, _named_params(vm.model, {}), eps=eps, max_coords=max_coords)
    return sorted(report.items())


SUITES = {
    "kernels": check_kernels,
    "model": check_model,
    "pipeline": check_pipeline,
}


def run_suite(name: str, tol: float = DEFAULT_TOL) -> Tuple[bool, CheckResult]:
    if name not in SUITES:
        raise ValueError(f"unknown gradcheck suite {name!r}")
    results = SUITES[name]()
    ok = all(err <= tol for _, err in results)
    return ok, results
