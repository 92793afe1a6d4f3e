"""Linear-beta DDPM noise schedule and the ancestral sampling loop.

Timesteps are 1-based: ``t`` runs from 1 (least noisy) to ``steps`` (most
noisy), and internal arrays are indexed with ``t - 1``.  All schedule
constants are kept in float64 and cast to the dtype of the tensor they
multiply, so the same schedule serves float32 models and float64 tests.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence, Union

import numpy as np
import torch

Timestep = Union[int, torch.Tensor]


class NoiseSchedule:
    """Precomputed diffusion constants for a fixed beta sequence."""

    def __init__(self, betas: np.ndarray):
        betas = np.asarray(betas, dtype=np.float64)
        if betas.ndim != 1 or betas.size < 1:
            raise ValueError("betas must be a non-empty 1-D array")
        if np.any(betas <= 0.0) or np.any(betas >= 1.0):
            raise ValueError("betas must lie strictly inside (0, 1)")
        self.betas = betas
        self.alphas = 1.0 - betas
        self.alphas_bar = np.cumprod(self.alphas)
        # q(x_{t-1} | x_t, x_0) variance; alpha_bar_0 is defined as 1.
        alphas_bar_prev = np.concatenate(([1.0], self.alphas_bar[:-1]))
        self.posterior_variance = betas * (1.0 - alphas_bar_prev) / (1.0 - self.alphas_bar)

    @property
    def steps(self) -> int:
        return int(self.betas.size)

    def _index(self, t: Timestep) -> Union[int, torch.Tensor]:
        if isinstance(t, torch.Tensor):
            if torch.any(t < 1) or torch.any(t > self.steps):
                raise ValueError(f"timestep out of range [1, {self.steps}]")
            return t.long() - 1
        if not 1 <= int(t) <= self.steps:
            raise ValueError(f"timestep {t} out of range [1, {self.steps}]")
        return int(t) - 1

    def coef(self, name: str, t: Timestep, like: torch.Tensor) -> torch.Tensor:
        """Schedule constant at step ``t``, shaped to broadcast against ``like``.

        Scalar ``t`` yields a 0-d tensor; a batch of timesteps yields shape
        ``[B, 1, ..., 1]`` so each batch entry gets its own constant.
        """
        arr = getattr(self, name)
        idx = self._index(t)
        if isinstance(idx, torch.Tensor):
            vals = torch.from_numpy(arr).to(like.dtype)[idx.cpu()]
            return vals.reshape(idx.shape + (1,) * (like.ndim - idx.ndim)).to(like.device)
        return torch.tensor(arr[idx], dtype=like.dtype, device=like.device)


def build_linear_schedule(steps: int = 1000, beta_start: float = 1e-4,
                          beta_end: float = 0.02) -> NoiseSchedule:
    """Schedule with betas spaced linearly from beta_start to beta_end inclusive."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if steps == 1:
        betas = np.array([beta_start], dtype=np.float64)
    else:
        betas = np.linspace(beta_start, beta_end, steps, dtype=np.float64)
    return NoiseSchedule(betas)


def q_sample_step(x_prev: torch.Tensor, t: Timestep, noise: torch.Tensor,
                  schedule: NoiseSchedule) -> torch.Tensor:
    """Single forward step: x_t = sqrt(1 - beta_t) x_{t-1} + sqrt(beta_t) noise."""
    alpha = schedule.coef("alphas", t, x_prev)
    beta = schedule.coef("betas", t, x_prev)
    return torch.sqrt(alpha) * x_prev + torch.sqrt(beta) * noise


def q_sample(x0: torch.Tensor, t: Timestep, noise: torch.Tensor,
             schedule: NoiseSchedule) -> torch.Tensor:
    """Closed-form jump to step t: sqrt(abar_t) x0 + sqrt(1 - abar_t) noise."""
    abar = schedule.coef("alphas_bar", t, x0)
    return torch.sqrt(abar) * x0 + torch.sqrt(1.0 - abar) * noise


def p_sample_step(x_t: torch.Tensor, t: int, eps_hat: torch.Tensor,
                  schedule: NoiseSchedule,
                  noise: Optional[torch.Tensor] = None) -> torch.Tensor:
    """One reverse step from x_t to x_{t-1} under the epsilon parameterization.

    The mean is (x_t - beta_t / sqrt(1 - abar_t) * eps_hat) / sqrt(alpha_t) and
    the added noise uses the fixed posterior variance.  At t = 1 no noise is
    added regardless of the ``noise`` argument.
    """
    if isinstance(t, torch.Tensor):
        raise TypeError("p_sample_step takes a scalar timestep")
    alpha = schedule.coef("alphas", t, x_t)
    beta = schedule.coef("betas", t, x_t)
    abar = schedule.coef("alphas_bar", t, x_t)
    mean = (x_t - beta / torch.sqrt(1.0 - abar) * eps_hat) / torch.sqrt(alpha)
    if t == 1:
        return mean
    if noise is None:
        noise = torch.zeros_like(x_t)
    var = schedule.coef("posterior_variance", t, x_t)
    return mean + torch.sqrt(var) * noise


def ddpm_sample(eps_model: Callable[[torch.Tensor, int], torch.Tensor],
                shape: Sequence[int],
                schedule: NoiseSchedule,
                generator: Optional[torch.Generator] = None,
                dtype: torch.dtype = torch.float32,
                initial_noise: Optional[torch.Tensor] = None,
                step_noise: Optional[Callable[[int], torch.Tensor]] = None,
                project: Optional[Callable[[torch.Tensor, int], torch.Tensor]] = None,
                ) -> torch.Tensor:
    """Ancestral DDPM sampling from pure noise down to x_0.

    Args:
        eps_model: callable mapping (x_t, t) to predicted noise.
        shape: shape of the sample to draw.
        schedule: noise schedule to walk.
        generator: seeded torch generator; required unless both noise
            sources are overridden.
        dtype: dtype of the generated sample.
        initial_noise: override for x_T (testing hook).
        step_noise: override producing the per-step noise z for t > 1
            (testing hook).
        project: optional constraint applied as x = project(x, t) after
            drawing x_T and after every reverse step; used for pinning a
            known frame through the chain.

    Returns:
        The final x_0 tensor.
    """
    if initial_noise is not None:
        x = initial_noise.to(dtype)
    else:
        if generator is None:
            raise ValueError("a generator is required when initial_noise is not given")
        x = torch.randn(list(shape), generator=generator, dtype=dtype)
    if project is not None:
        x = project(x, schedule.steps)
    for t in range(schedule.steps, 0, -1):
        eps_hat = eps_model(x, t)
        if t > 1:
            if step_noise is not None:
                z = step_noise(t).to(dtype)
            else:
                if generator is None:
                    raise ValueError("a generator is required when step_noise is not given")
                z = torch.randn(list(shape), generator=generator, dtype=dtype)
        else:
            z = None
        x = p_sample_step(x, t, eps_hat, schedule, noise=z)
        if project is not None:
            x = project(x, t - 1)
    return x
