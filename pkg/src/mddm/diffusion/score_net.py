"""Conditional score network: a compact 4-level U-Net over ``[S_t, S_p]``.

``S_t`` and ``S_p`` enter as four real channels (real/imag of each). Both
axes are edge-padded up to a multiple of ``2**(levels-1)`` and cropped back. A
sinusoidal embedding of the process time is injected into every residual
block, and one cross-attention layer at the bottleneck attends from the
flattened bottleneck positions to the rows of the multi-view condition.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from ..errors import ConfigError, ShapeError
from ..nn.blocks import MultiHeadAttention, group_count
from .sde import SdeConfig, std


@dataclass
class ScoreNetConfig:
    base_channels: int = 32
    levels: int = 4
    time_embed_dim: int = 128
    cond_dim: int = 256
    attn_heads: int = 8
    scale_by_sigma: bool = True

    def __post_init__(self):
        if self.levels < 1:
            raise ConfigError("levels must be >= 1")
        if self.time_embed_dim % 2:
            raise ConfigError("time_embed_dim must be even")

    @property
    def channels(self):
        return [self.base_channels * 2 ** i for i in range(self.levels)]

    def to_dict(self):
        return asdict(self)


def timestep_embedding(t: torch.Tensor, dim: int, max_freq: float = 1000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(torch.linspace(0.0, math.log(max_freq), half, dtype=t.dtype, device=t.device))
    args = t[:, None] * freqs[None]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


class ResBlock(nn.Module):
    def __init__(self, in_ch, out_ch, temb_dim):
        super().__init__()
        self.norm1 = nn.GroupNorm(group_count(in_ch), in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.temb = nn.Linear(temb_dim, out_ch)
        self.norm2 = nn.GroupNorm(group_count(out_ch), out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.gelu(self.norm1(x)))
        h = h + self.temb(temb)[:, :, None, None]
        h = self.conv2(F.gelu(self.norm2(h)))
        return self.skip(x) + h


class CrossAttention(nn.Module):
    """Residual cross-attention from a feature map to a token sequence."""

    def __init__(self, channels, cond_dim, heads):
        super().__init__()
        self.norm = nn.GroupNorm(group_count(channels), channels)
        self.attn = MultiHeadAttention(channels, heads, kv_dim=cond_dim)

    def forward(self, x, cond):
        b, c, f, t = x.shape
        q = self.norm(x).flatten(2).transpose(1, 2)  # (B, F*T, C)
        out, weights = self.attn(q, cond, cond)
        return x + out.transpose(1, 2).reshape(b, c, f, t), weights


class ScoreNetwork(nn.Module):
    def __init__(self, cfg: ScoreNetConfig | None = None, sde: SdeConfig | None = None):
        super().__init__()
        self.cfg = cfg = cfg or ScoreNetConfig()
        self.sde = sde or SdeConfig()
        ch = cfg.channels
        temb = cfg.time_embed_dim * 2
        self.time_mlp = nn.Sequential(nn.Linear(cfg.time_embed_dim, temb), nn.GELU(), nn.Linear(temb, temb))
        self.inp = nn.Conv2d(4, ch[0], 3, padding=1)
        self.down_blocks = nn.ModuleList([ResBlock(c, c, temb) for c in ch])
        self.downsample = nn.ModuleList([nn.Conv2d(ch[i], ch[i + 1], 3, stride=2, padding=1)
                                         for i in range(cfg.levels - 1)])
        self.mid1 = ResBlock(ch[-1], ch[-1], temb)
        self.cross = CrossAttention(ch[-1], cfg.cond_dim, cfg.attn_heads)
        self.mid2 = ResBlock(ch[-1], ch[-1], temb)
        self.upsample = nn.ModuleList([nn.ConvTranspose2d(ch[i + 1], ch[i], 4, stride=2, padding=1)
                                       for i in range(cfg.levels - 1)])
        self.up_blocks = nn.ModuleList([ResBlock(2 * c, c, temb) for c in ch])
        self.out_norm = nn.GroupNorm(group_count(ch[0]), ch[0])
        self.out = nn.Conv2d(ch[0], 2, 3, padding=1)
        self.last_attention = None

    def forward(self, x_t: torch.Tensor, s_p: torch.Tensor, c_m: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        """``x_t``, ``s_p``: complex ``(B, F, T)``; ``c_m``: ``(B, T', cond_dim)``; ``t``: ``(B,)``.

        Returns a complex score of the same shape as ``x_t``.
        """
        cfg = self.cfg
        if x_t.shape != s_p.shape:
            raise ShapeError(f"x_t {tuple(x_t.shape)} and s_p {tuple(s_p.shape)} differ")
        if x_t.ndim != 3 or c_m.ndim != 3 or c_m.shape[-1] != cfg.cond_dim:
            raise ShapeError(f"bad shapes x_t {tuple(x_t.shape)}, c_m {tuple(c_m.shape)}")
        bins, frames = x_t.shape[1:]
        mult = 2 ** (cfg.levels - 1)
        pad_f, pad_t = -bins % mult, -frames % mult
        x = torch.cat([torch.view_as_real(x_t), torch.view_as_real(s_p)], dim=-1).permute(0, 3, 1, 2)
        if pad_f or pad_t:
            x = F.pad(x, (0, pad_t, 0, pad_f), mode="replicate")

        t = torch.as_tensor(t, dtype=x.dtype)
        if t.ndim == 0:
            t = t.expand(x.shape[0])
        emb = self.time_mlp(timestep_embedding(t, cfg.time_embed_dim))

        h = self.inp(x)
        skips = []
        for i, block in enumerate(self.down_blocks):
            h = block(h, emb)
            skips.append(h)
            if i < cfg.levels - 1:
                h = self.downsample[i](h)
        h = self.mid1(h, emb)
        h, weights = self.cross(h, c_m)
        self.last_attention = weights.detach()
        h = self.mid2(h, emb)
        for i in reversed(range(cfg.levels)):
            if i < cfg.levels - 1:
                h = self.upsample[i](h)
            h = self.up_blocks[i](torch.cat([h, skips[i]], dim=1), emb)
        out = self.out(F.gelu(self.out_norm(h)))[:, :, :bins, :frames]
        score = torch.complex(out[:, 0], out[:, 1])
        if cfg.scale_by_sigma:
            score = score / std(t, self.sde).view(-1, 1, 1)
        return score
