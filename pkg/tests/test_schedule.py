import math

import numpy as np
import pytest
import torch

from scenetalk.schedule import (NoiseSchedule, build_linear_schedule,
                                ddpm_sample, p_sample_step, q_sample,
                                q_sample_step)

# Cumulative signal coefficient of the reference schedule, computed once with
# 60-digit arithmetic: prod_{t=1..1000} (1 - beta_t), betas linear from 1e-4
# to 0.02 inclusive.
ALPHA_BAR_1000 = 4.03582976538e-5

# sqrt(0.81) * 1.0 + sqrt(0.19) * 0.5 to 15 digits.
FORWARD_STEP_ORACLE = 1.11794494717703


def test_linear_schedule_endpoints_and_shape():
    s = build_linear_schedule(1000, 1e-4, 0.02)
    assert s.steps == 1000
    assert s.betas[0] == pytest.approx(1e-4, rel=0, abs=0)
    assert s.betas[-1] == pytest.approx(0.02, rel=0, abs=0)
    assert np.all(np.diff(s.betas) > 0)


def test_alpha_bar_matches_extended_precision_oracle():
    s = build_linear_schedule(1000, 1e-4, 0.02)
    assert s.alphas_bar[-1] == pytest.approx(ALPHA_BAR_1000, rel=1e-9)
    assert s.alphas_bar[-1] < 1e-4


def test_alpha_bar_monotone_decreasing():
    s = build_linear_schedule(500, 1e-4, 0.02)
    assert np.all(np.diff(s.alphas_bar) < 0)
    assert 0.0 < s.alphas_bar[-1] < s.alphas_bar[0] < 1.0


def test_forward_step_scalar_oracle():
    s = NoiseSchedule(np.array([0.19]))
    x = torch.tensor([1.0], dtype=torch.float64)
    eps = torch.tensor([0.5], dtype=torch.float64)
    out = q_sample_step(x, 1, eps, s)
    assert float(out) == pytest.approx(FORWARD_STEP_ORACLE, rel=1e-12)


def test_posterior_variance_formula():
    s = build_linear_schedule(50, 1e-3, 0.05)
    assert s.posterior_variance[0] == 0.0
    for t in (2, 17, 50):
        expected = (s.betas[t - 1] * (1.0 - s.alphas_bar[t - 2])
                    / (1.0 - s.alphas_bar[t - 1]))
        assert s.posterior_variance[t - 1] == pytest.approx(expected, rel=1e-14)


def test_closed_form_signal_coefficient_matches_iterated_chain():
    # Iterating the single-step update with all noise zero must scale x0 by
    # exactly sqrt(alpha_bar_t).
    s = build_linear_schedule(40, 1e-3, 0.06)
    x = torch.ones(3, dtype=torch.float64)
    zero = torch.zeros(3, dtype=torch.float64)
    for t in range(1, s.steps + 1):
        x = q_sample_step(x, t, zero, s)
        assert float(x[0]) == pytest.approx(math.sqrt(s.alphas_bar[t - 1]),
                                            rel=1e-13)


def test_closed_form_moments_match_iterated_chain():
    s = build_linear_schedule(10, 5e-3, 0.08)
    gen = torch.Generator().manual_seed(7)
    n = 200_000
    x0 = 0.7 * torch.ones(n, dtype=torch.float64)
    x = x0.clone()
    for t in range(1, s.steps + 1):
        x = q_sample_step(x, t, torch.randn(n, generator=gen,
                                            dtype=torch.float64), s)
    abar = s.alphas_bar[-1]
    assert float(x.mean()) == pytest.approx(0.7 * math.sqrt(abar), abs=5e-3)
    assert float(x.var()) == pytest.approx(1.0 - abar, rel=2e-2)


def test_q_sample_batch_timesteps_match_scalar_calls():
    s = build_linear_schedule(20, 1e-3, 0.05)
    gen = torch.Generator().manual_seed(0)
    x0 = torch.randn(4, 2, 3, 3, 3, generator=gen, dtype=torch.float64)
    eps = torch.randn(4, 2, 3, 3, 3, generator=gen, dtype=torch.float64)
    t = torch.tensor([1, 5, 12, 20])
    batched = q_sample(x0, t, eps, s)
    for i in range(4):
        single = q_sample(x0[i], int(t[i]), eps[i], s)
        assert torch.equal(batched[i], single)


def test_timestep_range_validation():
    s = build_linear_schedule(10, 1e-3, 0.05)
    x = torch.zeros(2)
    with pytest.raises(ValueError):
        q_sample(x, 0, x, s)
    with pytest.raises(ValueError):
        q_sample(x, 11, x, s)
    with pytest.raises(ValueError):
        p_sample_step(x, 0, x, s)


def test_p_sample_t1_adds_no_noise():
    s = build_linear_schedule(10, 1e-3, 0.05)
    gen = torch.Generator().manual_seed(1)
    x = torch.randn(5, generator=gen, dtype=torch.float64)
    eps = torch.randn(5, generator=gen, dtype=torch.float64)
    huge = 1e9 * torch.ones(5, dtype=torch.float64)
    assert torch.equal(p_sample_step(x, 1, eps, s, noise=huge),
                       p_sample_step(x, 1, eps, s, noise=None))


def _exact_chain_reconstruction(steps: int) -> float:
    """Worst relative error reconstructing x0 through the public sampler."""
    s = build_linear_schedule(steps, 1e-3, 0.06)
    gen = torch.Generator().manual_seed(42)
    x0 = torch.randn(2, 3, 4, 4, generator=gen, dtype=torch.float64)
    xs = [x0]
    for t in range(1, steps + 1):
        noise = torch.randn(x0.shape, generator=gen, dtype=torch.float64)
        xs.append(q_sample_step(xs[-1], t, noise, s))

    # Oracle inputs derived from the recorded forward trajectory: the
    # aggregate noise that explains x_t, and the posterior-noise realization
    # that maps the posterior mean back onto x_{t-1}.
    eps_bar = {}
    z = {}
    for t in range(1, steps + 1):
        abar = s.alphas_bar[t - 1]
        eps_bar[t] = (xs[t] - math.sqrt(abar) * x0) / math.sqrt(1.0 - abar)
        if t > 1:
            mean = p_sample_step(xs[t], t, eps_bar[t], s, noise=None)
            var = s.posterior_variance[t - 1]
            z[t] = (xs[t - 1] - mean) / math.sqrt(var)

    recon = ddpm_sample(
        eps_model=lambda x, t: eps_bar[t],
        shape=x0.shape, schedule=s, dtype=torch.float64,
        initial_noise=xs[-1], step_noise=lambda t: z[t])
    return float((recon - x0).abs().max() / x0.abs().max())


@pytest.mark.parametrize("steps", [1, 7, 50])
def test_reverse_chain_with_exact_noise_reconstructs_x0(steps):
    assert _exact_chain_reconstruction(steps) < 1e-5


def test_zero_predictor_closed_form():
    # With eps_hat = 0 and no step noise the sampler computes
    # x_T * prod 1/sqrt(alpha_t) = x_T / sqrt(alpha_bar_T).
    s = build_linear_schedule(25, 1e-3, 0.07)
    gen = torch.Generator().manual_seed(3)
    x_t = torch.randn(2, 5, generator=gen, dtype=torch.float64)
    out = ddpm_sample(lambda x, t: torch.zeros_like(x), x_t.shape, s,
                      dtype=torch.float64, initial_noise=x_t,
                      step_noise=lambda t: torch.zeros_like(x_t))
    expected = x_t / math.sqrt(s.alphas_bar[-1])
    assert torch.allclose(out, expected, rtol=1e-12, atol=0)


def test_ddpm_sample_deterministic_given_seed():
    s = build_linear_schedule(8, 1e-3, 0.05)
    outs = []
    for _ in range(2):
        gen = torch.Generator().manual_seed(11)
        outs.append(ddpm_sample(lambda x, t: 0.1 * x, (2, 3), s, generator=gen))
    assert torch.equal(outs[0], outs[1])


def test_schedule_rejects_bad_betas():
    with pytest.raises(ValueError):
        NoiseSchedule(np.array([0.0, 0.1]))
    with pytest.raises(ValueError):
        NoiseSchedule(np.array([1.0]))
    with pytest.raises(ValueError):
        NoiseSchedule(np.zeros((2, 2)))
