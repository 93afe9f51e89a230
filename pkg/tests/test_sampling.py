import math

import numpy as np
import pytest
import torch

from _oracles import brownian_increments, coarsen, marginal, sample_toy
from mddm.diffusion.sampling import reverse_sample
from mddm.diffusion.sde import DiffusionState, SdeConfig, complex_normal, diffusion_coeff, drift
from mddm.errors import ConfigError, NumericError

CFG = SdeConfig()


def test_toy_recovers_target_moments():
    x = sample_toy(10_000, 50, seed=0)
    mu, var = marginal(CFG.t_eps)
    assert abs(x.mean().item() / mu - 1) < 0.02
    assert abs(x.var().item() / var - 1) < 0.05


def test_toy_step_halving_consistency():
    start, fine = brownian_increments(10_000, 100, seed=4)
    x_fine = sample_toy(10_000, 100, 0, noise=(start, fine))
    x_coarse = sample_toy(10_000, 50, 0, noise=(start, coarsen(fine)))
    se_mean = x_fine.std().item() / math.sqrt(10_000)
    assert abs(x_fine.mean().item() - x_coarse.mean().item()) < 2 * se_mean


def test_single_step_matches_hand_update():
    x0 = torch.tensor([0.3 + 0.1j], dtype=torch.complex128)
    s_p = torch.tensor([0.5 - 0.2j], dtype=torch.complex128)
    score = lambda x, sp, c, t: -2.0 * x
    out = reverse_sample(DiffusionState(x0, 0.5), s_p, None, score, 1, torch.Generator().manual_seed(0), CFG)
    dt = 0.5 - CFG.t_eps
    g = diffusion_coeff(0.5)
    expected = x0 + (-drift(x0, s_p) + g * g * (-2.0 * x0)) * dt  # last step carries no noise
    assert torch.allclose(out, expected, atol=1e-14)


def test_deterministic_given_seed():
    s_p = complex_normal((1, 6, 5), torch.Generator().manual_seed(1))
    score = lambda x, sp, c, t: sp - x
    runs = [reverse_sample(DiffusionState(s_p.clone(), 0.6), s_p, None, score, 7,
                           torch.Generator().manual_seed(3), CFG, corrector=True) for _ in range(2)]
    assert torch.equal(runs[0], runs[1])


def test_nan_reports_step():
    s_p = torch.ones(3, dtype=torch.complex64)
    calls = {"n": 0}

    def score(x, sp, c, t):
        calls["n"] += 1
        return x * (float("nan") if calls["n"] == 3 else 1.0)

    with pytest.raises(NumericError, match="step 2"):
        reverse_sample(DiffusionState(s_p, 0.5), s_p, None, score, 5, None, CFG)


def test_argument_checks():
    s_p = torch.ones(2, dtype=torch.complex64)
    with pytest.raises(ConfigError):
        reverse_sample(DiffusionState(s_p, 0.5), s_p, None, lambda *a: a[0], 0)
    with pytest.raises(ConfigError):
        reverse_sample(DiffusionState(s_p, CFG.t_eps), s_p, None, lambda *a: a[0], 3)


def test_time_grid_passed_to_score():
    seen = []
    s_p = torch.zeros(2, 3, dtype=torch.complex64)

    def score(x, sp, c, t):
        seen.append(t.clone())
        return torch.zeros_like(x)

    reverse_sample(DiffusionState(s_p, 0.63), s_p, None, score, 3, torch.Generator().manual_seed(0), CFG)
    assert [t.shape for t in seen] == [(2,)] * 3
    assert np.allclose([t[0].item() for t in seen], [0.63, 0.43, 0.23], atol=1e-6)


def test_corrector_uses_extra_score_calls():
    count = {"n": 0}
    s_p = torch.zeros(1, 4, dtype=torch.complex64)

    def score(x, sp, c, t):
        count["n"] += 1
        return -x

    reverse_sample(DiffusionState(s_p, 0.5), s_p, None, score, 4, torch.Generator().manual_seed(0), CFG,
                   corrector=True)
    assert count["n"] == 8
