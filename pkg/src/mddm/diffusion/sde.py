"""Mean-reverting variance-exploding SDE anchored on the discriminative estimate.

Forward process::

    dx = stiffness * (anchor - x) dt + g(t) dw
    g(t) = sigma_min * r**t * sqrt(2 ln r),     r = sigma_max / sigma_min

Its Gaussian perturbation kernel has mean
``exp(-stiffness t) s_c + (1 - exp(-stiffness t)) s_p`` and variance
``lambda(t)`` solving ``lambda' = -2 stiffness lambda + g(t)**2``, ``lambda(0) = 0``::

    lambda(t) = sigma_min**2 ln r (r**(2t) - exp(-2 stiffness t)) / (stiffness + ln r)

All functions accept python floats, numpy arrays or torch tensors for ``t``;
batched ``t`` of shape ``(B,)`` broadcasts over the trailing grid dims of ``x``.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch

from ..errors import ConfigError, NumericError, ShapeError


@dataclass(frozen=True)
class SdeConfig:
    stiffness: float = 1.5
    sigma_min: float = 0.05
    sigma_max: float = 0.5
    horizon: float = 1.0
    t_eps: float = 0.03
    total_steps: int = 50

    def __post_init__(self):
        if not 0 < self.sigma_min < self.sigma_max:
            raise ConfigError("need 0 < sigma_min < sigma_max")
        if self.stiffness <= 0:
            raise ConfigError("stiffness must be positive")
        if not 0 < self.t_eps < self.horizon:
            raise ConfigError("need 0 < t_eps < horizon")
        if self.total_steps < 1:
            raise ConfigError("total_steps must be >= 1")

    @property
    def log_ratio(self) -> float:
        return math.log(self.sigma_max / self.sigma_min)

    def to_dict(self):
        return asdict(self)


@dataclass
class DiffusionState:
    x_t: torch.Tensor
    t: float


def _exp(v):
    if isinstance(v, torch.Tensor):
        return torch.exp(v)
    return np.exp(v)


def _bcast(t, x):
    """Reshape a per-batch time vector so it broadcasts against ``x``."""
    if isinstance(t, torch.Tensor) and t.ndim == 1 and isinstance(x, torch.Tensor) and x.ndim > 1:
        return t.view(-1, *([1] * (x.ndim - 1)))
    if isinstance(t, np.ndarray) and t.ndim == 1 and isinstance(x, np.ndarray) and x.ndim > 1:
        return t.reshape(-1, *([1] * (x.ndim - 1)))
    return t


def _check_shapes(a, b):
    if tuple(a.shape) != tuple(b.shape):
        raise ShapeError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def drift(x, anchor, cfg: SdeConfig = SdeConfig()):
    _check_shapes(x, anchor)
    return cfg.stiffness * (anchor - x)


def diffusion_coeff(t, cfg: SdeConfig = SdeConfig()):
    r = cfg.sigma_max / cfg.sigma_min
    return cfg.sigma_min * r ** t * math.sqrt(2 * cfg.log_ratio)


def mean(s_c, s_p, t, cfg: SdeConfig = SdeConfig()):
    _check_shapes(s_c, s_p)
    decay = _exp(-cfg.stiffness * _bcast(t, s_c))
    return decay * s_c + (1 - decay) * s_p


def variance(t, cfg: SdeConfig = SdeConfig()):
    lr = cfg.log_ratio
    r = cfg.sigma_max / cfg.sigma_min
    return cfg.sigma_min ** 2 * lr * (r ** (2 * t) - _exp(-2 * cfg.stiffness * t)) / (cfg.stiffness + lr)


def std(t, cfg: SdeConfig = SdeConfig()):
    v = variance(t, cfg)
    if isinstance(v, torch.Tensor):
        return v.clamp_min(0).sqrt()
    return np.sqrt(np.maximum(v, 0.0))


def complex_normal(shape, generator: torch.Generator | None = None, dtype=torch.complex64):
    """Complex draw with independent unit-variance real and imaginary parts."""
    real = torch.float64 if dtype == torch.complex128 else torch.float32
    re = torch.randn(shape, generator=generator, dtype=real)
    im = torch.randn(shape, generator=generator, dtype=real)
    return torch.complex(re, im)


def noise_like(x: torch.Tensor, generator: torch.Generator | None = None):
    if x.is_complex():
        return complex_normal(x.shape, generator, x.dtype)
    return torch.randn(x.shape, generator=generator, dtype=x.dtype)


def perturb(s_c, s_p, t, z, cfg: SdeConfig = SdeConfig()) -> DiffusionState:
    """``x_t = mean(s_c, s_p, t) + std(t) z``."""
    _check_shapes(s_c, z)
    x_t = mean(s_c, s_p, t, cfg) + _bcast(std(t, cfg), z) * z
    return DiffusionState(x_t, t)


def step_time(k_steps: int, cfg: SdeConfig = SdeConfig()) -> float:
    """Process time reached after ``k_steps`` of the ``total_steps`` reference grid."""
    if not 0 <= k_steps <= cfg.total_steps:
        raise ConfigError(f"k_steps must be in [0, {cfg.total_steps}], got {k_steps}")
    return cfg.t_eps + (k_steps / cfg.total_steps) * (cfg.horizon - cfg.t_eps)


def init_prior(s_p, k_steps: int, generator: torch.Generator | None = None,
               cfg: SdeConfig = SdeConfig()) -> DiffusionState:
    """Truncated start ``S_k = S_p + sigma(tau_k) z``; ``k_steps == 0`` returns ``S_p`` untouched."""
    tau = step_time(k_steps, cfg)
    if k_steps == 0:
        return DiffusionState(s_p, cfg.t_eps)
    return DiffusionState(s_p + float(std(tau, cfg)) * noise_like(s_p, generator), tau)


def dsm_loss(net, s_c, s_p, c_m, generator: torch.Generator | None = None, cfg: SdeConfig = SdeConfig(),
             t=None, z=None, return_parts: bool = False):
    """Denoising score matching: mean squared error between ``net`` and ``-z / sigma(t)``.

    ``net(x_t, s_p, c_m, t)`` must return a score with the shape of ``x_t``.
    ``t`` defaults to a per-example uniform draw on ``[t_eps, horizon]``.
    """
    _check_shapes(s_c, s_p)
    batch = s_c.shape[0]
    if t is None:
        u = torch.rand(batch, generator=generator, dtype=torch.float64)
        t = cfg.t_eps + u * (cfg.horizon - cfg.t_eps)
    t = torch.as_tensor(t, dtype=torch.float64)
    if t.ndim == 0:
        t = t.expand(batch)
    sigma = std(t, cfg)
    if (sigma < 1e-8).any():
        raise NumericError(f"sigma(t) below 1e-8 for t={t.min().item():.3g}")
    if z is None:
        z = noise_like(s_c, generator)
    real_dtype = s_c.real.dtype if s_c.is_complex() else s_c.dtype
    t_r, sigma_r = t.to(real_dtype), sigma.to(real_dtype)
    x_t = perturb(s_c, s_p, t_r, z, cfg).x_t
    score = net(x_t, s_p, c_m, t_r)
    err = score + z / _bcast(sigma_r, z)
    loss = (err.abs() ** 2 if err.is_complex() else err ** 2).mean()
    if return_parts:
        return loss, {"t": t_r, "z": z, "x_t": x_t, "score": score}
    return loss
