"""Shared differentiable building blocks.

Layouts: 2-D paths use ``(batch, channels, freq, frames)``, 1-D paths use
``(batch, channels, frames)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from ..errors import ConfigError, ShapeError, UnsupportedError


def _pair(v, n):
    if isinstance(v, int):
        return (v,) * n
    v = tuple(v)
    if len(v) != n:
        raise ConfigError(f"expected {n} values, got {v}")
    return v


def group_count(channels: int, max_groups: int = 8) -> int:
    return math.gcd(max_groups, channels)


def strided_padding(kernel: Sequence[int], stride: Sequence[int], dilation: int = 1) -> list[int]:
    """F.pad spec so every axis of length L (divisible by its stride) maps to L / stride.

    Total padding per axis is ``dilation*(k-1) + 1 - s``, split left-biased.
    """
    pads = []
    for k, s in zip(reversed(kernel), reversed(stride)):
        total = dilation * (k - 1) + 1 - s
        if total < 0:
            raise ConfigError(f"kernel {k} smaller than stride {s}")
        left = total // 2
        pads += [left, total - left]
    return pads


class ConvNormAct(nn.Module):
    """Conv -> GroupNorm -> GELU, with explicit padding so strided axes divide exactly."""

    def __init__(self, in_ch, out_ch, kernel, stride=1, dilation=1, dims=2):
        super().__init__()
        self.kernel = _pair(kernel, dims)
        self.stride = _pair(stride, dims)
        self.dilation = dilation
        self.pad = strided_padding(self.kernel, self.stride, dilation)
        conv = nn.Conv2d if dims == 2 else nn.Conv1d
        self.conv = conv(in_ch, out_ch, self.kernel, self.stride, padding=0, dilation=dilation)
        self.norm = nn.GroupNorm(group_count(out_ch), out_ch)
        self.act = nn.GELU()
        nn.init.kaiming_uniform_(self.conv.weight, a=math.sqrt(5))

    def forward(self, x):
        return self.act(self.norm(self.conv(F.pad(x, self.pad))))


@dataclass(frozen=True)
class EncoderBlockConfig:
    in_channels: int
    out_channels: int
    kernel: int | tuple = 4
    stride: int | tuple = 2
    axis: str = "freq"  # "freq" -> 2-D conv over (freq, frames); "time" -> 1-D conv over samples
    dilations: tuple = (1, 2)

    def __post_init__(self):
        if tuple(self.dilations) != (1, 2):
            raise ConfigError("encoder dilations are fixed to (1, 2)")
        if self.axis not in ("freq", "time"):
            raise ConfigError(f"axis must be 'freq' or 'time', got {self.axis!r}")
        if min(_pair(self.stride, self.dims)) < 1:
            raise ConfigError("stride must be >= 1")

    @property
    def dims(self) -> int:
        return 2 if self.axis == "freq" else 1


class EncoderBlock(nn.Module):
    """Two Conv-GroupNorm-GELU sub-modules: the first strided (dilation 1), the second dilation 2."""

    def __init__(self, cfg: EncoderBlockConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.dims
        self.down = ConvNormAct(cfg.in_channels, cfg.out_channels, cfg.kernel, cfg.stride, 1, d)
        self.refine = ConvNormAct(cfg.out_channels, cfg.out_channels, cfg.kernel, 1, 2, d)

    def output_shape(self, shape):
        return (shape[0], self.cfg.out_channels,
                *(n // s for n, s in zip(shape[2:], self.down.stride)))

    def forward(self, x):
        spatial = x.shape[2:]
        if len(spatial) != self.cfg.dims:
            raise ShapeError(f"{self.cfg.axis} block expects {self.cfg.dims} spatial dims, got {tuple(x.shape)}")
        for n, k in zip(spatial, self.down.kernel):
            if n < k:
                raise ShapeError(f"spatial extent {n} smaller than kernel {k}")
        return self.refine(self.down(x))


def encoder_block(x: torch.Tensor, cfg: EncoderBlockConfig) -> torch.Tensor:
    """Functional form; builds a freshly initialised block (mostly useful in tests)."""
    return EncoderBlock(cfg).to(x.dtype)(x)


class GRULayer(nn.Module):
    """Batch-first GRU with orthogonal recurrent weights. Output dim is hidden (x2 if bidirectional)."""

    def __init__(self, input_size, hidden, bidirectional=False):
        super().__init__()
        self.hidden = hidden
        self.bidirectional = bidirectional
        self.gru = nn.GRU(input_size, hidden, batch_first=True, bidirectional=bidirectional)
        for name, p in self.gru.named_parameters():
            if name.startswith("weight_hh"):
                for chunk in p.data.chunk(3, 0):
                    nn.init.orthogonal_(chunk)

    @property
    def output_size(self):
        return self.hidden * (2 if self.bidirectional else 1)

    def forward(self, x, h0=None):
        if x.shape[1] < 1:
            raise ShapeError("GRU needs a sequence of length >= 1")
        out, _ = self.gru(x, h0)
        return out


class MultiHeadAttention(nn.Module):
    """Scaled dot-product attention with separate q/k/v/out projections.

    ``forward`` returns ``(output, weights)`` where weights are
    ``(batch, heads, len_q, len_k)`` and sum to one over the last axis.
    """

    def __init__(self, embed_dim, heads, kv_dim=None):
        super().__init__()
        if embed_dim % heads:
            raise ConfigError(f"embed dim {embed_dim} not divisible by {heads} heads")
        kv_dim = kv_dim or embed_dim
        self.heads = heads
        self.head_dim = embed_dim // heads
        self.q_proj = nn.Linear(embed_dim, embed_dim)
        self.k_proj = nn.Linear(kv_dim, embed_dim)
        self.v_proj = nn.Linear(kv_dim, embed_dim)
        self.out_proj = nn.Linear(embed_dim, embed_dim)

    def _split(self, x):
        b, n, _ = x.shape
        return x.view(b, n, self.heads, self.head_dim).transpose(1, 2)

    def forward(self, q, k, v):
        b, nq, e = q.shape
        qh, kh, vh = self._split(self.q_proj(q)), self._split(self.k_proj(k)), self._split(self.v_proj(v))
        scores = qh @ kh.transpose(-1, -2) / math.sqrt(self.head_dim)
        weights = scores.softmax(dim=-1)
        out = (weights @ vh).transpose(1, 2).reshape(b, nq, e)
        return self.out_proj(out), weights


def multi_head_attention(q, k, v, heads: int, module: MultiHeadAttention | None = None):
    module = module or MultiHeadAttention(q.shape[-1], heads, k.shape[-1]).to(q.dtype)
    return module(q, k, v)


def grad_check(block: nn.Module | Callable, x: torch.Tensor | Sequence[torch.Tensor], eps: float = 1e-4,
               max_per_tensor: int = 24, seed: int = 0) -> float:
    """Max relative deviation between autograd and central-difference gradients.

    The scalar objective is ``sum(out * r)`` for a fixed random ``r``. At most
    ``max_per_tensor`` coordinates of each parameter/input are probed. Inputs
    and parameters should be float64.
    """
    if not 1e-5 <= eps <= 1e-3:
        raise ConfigError("eps must lie in [1e-5, 1e-3]")
    xs = [x] if isinstance(x, torch.Tensor) else list(x)
    xs = [t.detach().clone().requires_grad_(t.is_floating_point()) for t in xs]
    params = [p for p in block.parameters() if p.requires_grad] if isinstance(block, nn.Module) else []
    leaves = [t for t in xs if t.requires_grad] + params
    if any(t.dtype != torch.float64 for t in leaves):
        raise UnsupportedError("grad_check requires float64 inputs and parameters")

    gen = torch.Generator().manual_seed(seed)
    proj = {}

    def objective():
        out = block(*xs)
        outs = out if isinstance(out, (tuple, list)) else (out,)
        total = 0.0
        for i, o in enumerate(outs):
            if not isinstance(o, torch.Tensor) or not (o.is_floating_point() or o.is_complex()):
                continue
            o = torch.view_as_real(o) if o.is_complex() else o
            if i not in proj:
                proj[i] = torch.randn(o.shape, generator=gen, dtype=o.dtype)
            total = total + (o * proj[i]).sum()
        if not isinstance(total, torch.Tensor):
            raise UnsupportedError("block produced no differentiable output")
        return total

    loss = objective()
    analytic = torch.autograd.grad(loss, leaves, allow_unused=True)

    pairs = []
    with torch.no_grad():
        for leaf, g in zip(leaves, analytic):
            g = torch.zeros_like(leaf) if g is None else g
            flat = leaf.view(-1)
            n = flat.numel()
            idx = torch.randperm(n, generator=gen)[:max_per_tensor] if n > max_per_tensor else torch.arange(n)
            for i in idx.tolist():
                orig = flat[i].item()
                flat[i] = orig + eps
                fp = objective().item()
                flat[i] = orig - eps
                fm = objective().item()
                flat[i] = orig
                pairs.append((g.reshape(-1)[i].item(), (fp - fm) / (2 * eps)))
    scale = max(abs(n) for _, n in pairs) if pairs else 0.0
    floor = max(scale * 1e-3, 1e-12)
    return max(abs(a - n) / max(abs(a), abs(n), floor) for a, n in pairs)
