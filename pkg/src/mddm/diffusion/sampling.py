"""Reverse-time Euler-Maruyama sampler with an optional Langevin corrector."""
from __future__ import annotations

import torch

from ..errors import ConfigError, NumericError
from .sde import DiffusionState, SdeConfig, diffusion_coeff, drift, noise_like, std


def reverse_sample(state: DiffusionState, s_p, c_m, score_fn, n_steps: int,
                   generator: torch.Generator | None = None, cfg: SdeConfig = SdeConfig(),
                   corrector: bool = False, snr: float = 0.5, anchor=None, noise_source=None) -> torch.Tensor:
    """Integrate the reverse SDE from ``state.t`` down to ``t_eps`` in ``n_steps`` uniform steps.

    Per step, with ``dt = (state.t - t_eps) / n_steps``::

        x <- x + (-f(x, anchor) + g(t)**2 * score(x, t)) * dt + g(t) sqrt(dt) z

    The last step is noise-free. ``anchor`` defaults to ``s_p``.
    ``score_fn(x, s_p, c_m, t)`` receives ``t`` as a batch vector.
    ``noise_source(step, x)``, if given, replaces the generator draws of the
    predictor (used to couple runs at different step sizes).
    """
    if n_steps < 1:
        raise ConfigError("n_steps must be >= 1")
    if state.t <= cfg.t_eps:
        raise ConfigError(f"state time {state.t} must exceed t_eps {cfg.t_eps}")
    anchor = s_p if anchor is None else anchor
    x = state.x_t
    batch = x.shape[0] if x.ndim > 0 else 1
    real_dtype = x.real.dtype if x.is_complex() else x.dtype
    dt = (state.t - cfg.t_eps) / n_steps
    for i in range(n_steps):
        t = state.t - i * dt
        tv = torch.full((batch,), t, dtype=real_dtype)
        if corrector:
            x = _langevin_step(x, s_p, c_m, score_fn, tv, t, snr, generator, cfg)
        g = float(diffusion_coeff(t, cfg))
        score = score_fn(x, s_p, c_m, tv)
        x = x + (-drift(x, anchor, cfg) + g * g * score) * dt
        if i < n_steps - 1:
            z = noise_like(x, generator) if noise_source is None else noise_source(i, x)
            x = x + g * dt ** 0.5 * z
        if not torch.isfinite(torch.view_as_real(x) if x.is_complex() else x).all():
            raise NumericError(f"non-finite state after reverse step {i}")
    return x


def _langevin_step(x, s_p, c_m, score_fn, tv, t, snr, generator, cfg):
    step = 2.0 * (snr * float(std(t, cfg))) ** 2
    grad = score_fn(x, s_p, c_m, tv)
    return x + step * grad + (2.0 * step) ** 0.5 * noise_like(x, generator)
