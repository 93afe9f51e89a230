"""Multi-view discriminative network.

Frequency branch: 4 strided encoders over the compressed complex spectrogram
(real/imag as two channels), noise modulation after encoder 1, TF-GRU, and a
collapsing conv that removes the frequency axis. Time branch: a parallel 1-D
U-Net encoder over the waveform. Both bottlenecks are summed and passed through
multi-head self-attention to give the multi-view condition ``c_m``, which feeds
two decoders (spectrogram and waveform) and the score network.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from ..errors import ConfigError, InputError, ShapeError
from .blocks import ConvNormAct, EncoderBlock, EncoderBlockConfig, GRULayer, MultiHeadAttention, group_count


@dataclass
class MdmConfig:
    freq_bins: int = 256  # Nyquist bin dropped
    start_channels: int = 32
    levels: int = 4
    freq_kernel: int = 4
    frame_kernel: int = 3
    wave_kernel: int = 8
    wave_stride: int = 4
    tfgru_hidden: int = 256
    npm_channels: tuple = (16, 32, 64, 128)
    npm_gru_hidden: int = 128
    n_templates: int = 16
    template_dim: int = 256
    npm_heads: int = 8
    mlp_hidden: int = 256
    fusion_heads: int = 8
    use_time_branch: bool = True
    use_noise_branch: bool = True

    def __post_init__(self):
        self.npm_channels = tuple(self.npm_channels)
        if self.freq_bins % 2 ** self.levels:
            raise ConfigError(f"freq_bins {self.freq_bins} not divisible by 2**{self.levels}")
        if self.freq_bins % 2 ** len(self.npm_channels):
            raise ConfigError("freq_bins not divisible by the NPM frequency strides")
        if self.template_dim != 2 * self.npm_gru_hidden:
            raise ConfigError("template_dim must equal 2 * npm_gru_hidden (bidirectional GRU output)")
        if self.bottleneck_channels % self.fusion_heads:
            raise ConfigError("bottleneck channels not divisible by fusion heads")

    @property
    def channels(self) -> list[int]:
        return [self.start_channels * 2 ** i for i in range(self.levels)]

    @property
    def bottleneck_channels(self) -> int:
        return self.channels[-1]

    @property
    def bottleneck_freq(self) -> int:
        return self.freq_bins // 2 ** self.levels

    @property
    def samples_per_step(self) -> int:
        """Waveform samples per bottleneck step (time branch)."""
        return self.wave_stride ** self.levels

    @property
    def hop(self) -> int:
        # frequency branch halves the frame rate once, so one bottleneck step = 2 hops
        return self.samples_per_step // 2

    def to_dict(self):
        return asdict(self)


def modulate(e: torch.Tensor, gamma: torch.Tensor, beta: torch.Tensor) -> torch.Tensor:
    """Frame-wise feature modulation ``E * gamma + beta`` along the frequency axis.

    ``e`` is ``(B, C, F, T)``; ``gamma``/``beta`` are ``(B, T, F)`` and are
    broadcast over channels.
    """
    if gamma.shape != beta.shape:
        raise ShapeError(f"gamma {tuple(gamma.shape)} and beta {tuple(beta.shape)} differ")
    b, c, f, t = e.shape
    if gamma.shape[-2:] != (t, f) or gamma.shape[0] != b:
        raise ShapeError(f"modulation {tuple(gamma.shape)} incompatible with feature map {tuple(e.shape)}")
    g = gamma.transpose(1, 2).unsqueeze(1)
    bt = beta.transpose(1, 2).unsqueeze(1)
    return e * g + bt


@dataclass
class ModulationPair:
    gamma: torch.Tensor  # (B, T, F)
    beta: torch.Tensor
    attention: torch.Tensor | None = None  # (B, heads, T, n_templates)


class NoisePerception(nn.Module):
    """Unsupervised frame-level noise conditioning from the noisy magnitude."""

    def __init__(self, cfg: MdmConfig):
        super().__init__()
        self.cfg = cfg
        chans = (1,) + cfg.npm_channels
        self.convs = nn.Sequential(*[
            ConvNormAct(chans[i], chans[i + 1], 3, stride=(2, 1)) for i in range(len(cfg.npm_channels))
        ])
        reduced = cfg.freq_bins // 2 ** len(cfg.npm_channels)
        self.gru = GRULayer(chans[-1] * reduced, cfg.npm_gru_hidden, bidirectional=True)
        self.templates = nn.Parameter(torch.randn(cfg.n_templates, cfg.template_dim) * 0.1)
        self.attn = MultiHeadAttention(cfg.template_dim, cfg.npm_heads)
        out_dim = cfg.freq_bins // 2  # freq extent of the first encoder output
        self.gamma_mlp = self._mlp(cfg.template_dim, cfg.mlp_hidden, out_dim, 1.0)
        self.beta_mlp = self._mlp(cfg.template_dim, cfg.mlp_hidden, out_dim, 0.0)

    @staticmethod
    def _mlp(d_in, hidden, d_out, bias_init):
        mlp = nn.Sequential(nn.Linear(d_in, hidden), nn.GELU(), nn.Linear(hidden, hidden), nn.GELU(),
                            nn.Linear(hidden, d_out))
        nn.init.zeros_(mlp[-1].weight)
        nn.init.constant_(mlp[-1].bias, bias_init)
        return mlp

    def forward(self, mag: torch.Tensor) -> ModulationPair:
        """``mag``: ``(B, F, T)`` non-negative magnitudes."""
        h = self.convs(mag.unsqueeze(1))  # (B, C, F', T)
        b, c, f, t = h.shape
        h = h.permute(0, 3, 1, 2).reshape(b, t, c * f)
        h = self.gru(h)  # (B, T, template_dim)
        keys = self.templates.unsqueeze(0).expand(b, -1, -1)
        noise, weights = self.attn(h, keys, keys)
        return ModulationPair(self.gamma_mlp(noise), self.beta_mlp(noise), weights)


def npm_forward(mag: torch.Tensor, npm: NoisePerception) -> ModulationPair:
    if (mag < 0).any():
        raise InputError("magnitudes must be non-negative")
    return npm(mag)


class TFGRU(nn.Module):
    """GRU along frames (per frequency bin), then along frequency (per frame), each residual."""

    def __init__(self, channels, hidden):
        super().__init__()
        self.time_gru = GRULayer(channels, hidden)
        self.time_proj = nn.Linear(hidden, channels)
        self.freq_gru = GRULayer(channels, hidden)
        self.freq_proj = nn.Linear(hidden, channels)

    def forward(self, x):
        b, c, f, t = x.shape
        h = x.permute(0, 2, 3, 1).reshape(b * f, t, c)
        h = h + self.time_proj(self.time_gru(h))
        h = h.reshape(b, f, t, c).transpose(1, 2).reshape(b * t, f, c)
        h = h + self.freq_proj(self.freq_gru(h))
        return h.reshape(b, t, f, c).permute(0, 3, 2, 1)


class FreqEncoder(nn.Module):
    def __init__(self, cfg: MdmConfig):
        super().__init__()
        chans = [2] + cfg.channels
        self.blocks = nn.ModuleList()
        for i in range(cfg.levels):
            last = i == cfg.levels - 1
            kernel = (cfg.freq_kernel, cfg.frame_kernel + (1 if last else 0))
            stride = (2, 2 if last else 1)
            self.blocks.append(EncoderBlock(EncoderBlockConfig(chans[i], chans[i + 1], kernel, stride, "freq")))
        c = cfg.bottleneck_channels
        self.tfgru = TFGRU(c, cfg.tfgru_hidden)
        self.collapse = nn.Conv2d(c, c, (cfg.bottleneck_freq, 1))

    def forward(self, x, modulation: ModulationPair | None = None):
        """``x``: ``(B, 2, F, T)`` with T even. Returns ``(bottleneck (B, C, T/2), skips)``."""
        if x.shape[-1] < 2:
            raise ShapeError("frequency branch needs at least 2 frames")
        skips = []
        for i, block in enumerate(self.blocks):
            x = block(x)
            if i == 0 and modulation is not None:
                x = modulate(x, modulation.gamma, modulation.beta)
            skips.append(x)
        x = self.collapse(self.tfgru(x))
        return x.squeeze(2), skips


class TimeEncoder(nn.Module):
    def __init__(self, cfg: MdmConfig):
        super().__init__()
        chans = [1] + cfg.channels
        self.blocks = nn.ModuleList([
            EncoderBlock(EncoderBlockConfig(chans[i], chans[i + 1], cfg.wave_kernel, cfg.wave_stride, "time"))
            for i in range(cfg.levels)
        ])

    def forward(self, x):
        """``x``: ``(B, 1, L)`` with L a multiple of ``wave_stride**levels``."""
        skips = []
        for block in self.blocks:
            x = block(x)
            skips.append(x)
        return x, skips


class ViewFusion(nn.Module):
    """Sum of the two bottlenecks followed by residual multi-head self-attention."""

    def __init__(self, channels, heads):
        super().__init__()
        self.attn = MultiHeadAttention(channels, heads)

    def forward(self, freq_b, time_b):
        if freq_b.shape != time_b.shape:
            raise ShapeError(f"bottleneck mismatch: {tuple(freq_b.shape)} vs {tuple(time_b.shape)}")
        x = (freq_b + time_b).transpose(1, 2)  # (B, T', C)
        out, weights = self.attn(x, x, x)
        return x + out, weights


def _up_block(in_ch, out_ch, kernel, stride, dims, final):
    """Skip-concat refinement then a transposed conv that inverts the matching encoder stride."""
    if dims == 2:
        convt = nn.ConvTranspose2d(in_ch, out_ch, kernel, stride,
                                   padding=tuple((k - s) // 2 for k, s in zip(kernel, stride)))
    else:
        convt = nn.ConvTranspose1d(in_ch, out_ch, kernel, stride, padding=(kernel - stride) // 2)
    layers = [ConvNormAct(2 * in_ch, in_ch, 3, 1, 1, dims), convt]
    if not final:
        layers += [nn.GroupNorm(group_count(out_ch), out_ch), nn.GELU()]
    return nn.Sequential(*layers)


class FreqDecoder(nn.Module):
    def __init__(self, cfg: MdmConfig):
        super().__init__()
        c = cfg.bottleneck_channels
        self.expand = nn.ConvTranspose2d(c, c, (cfg.bottleneck_freq, 1))
        chans = [2] + cfg.channels
        self.blocks = nn.ModuleList()
        for i in reversed(range(cfg.levels)):
            last = i == cfg.levels - 1
            kernel = (cfg.freq_kernel, cfg.frame_kernel + (1 if last else 0))
            stride = (2, 2 if last else 1)
            self.blocks.append(_up_block(chans[i + 1], chans[i], kernel, stride, 2, final=i == 0))

    def forward(self, c_m, skips):
        x = self.expand(c_m.transpose(1, 2).unsqueeze(2))
        for block, skip in zip(self.blocks, reversed(skips)):
            x = block(torch.cat([x, skip], dim=1))
        return x


class TimeDecoder(nn.Module):
    def __init__(self, cfg: MdmConfig):
        super().__init__()
        chans = [1] + cfg.channels
        self.blocks = nn.ModuleList([
            _up_block(chans[i + 1], chans[i], cfg.wave_kernel, cfg.wave_stride, 1, final=i == 0)
            for i in reversed(range(cfg.levels))
        ])

    def forward(self, c_m, skips):
        x = c_m.transpose(1, 2)
        for block, skip in zip(self.blocks, reversed(skips)):
            x = block(torch.cat([x, skip], dim=1))
        return x


@dataclass
class MdmOutput:
    s_p: torch.Tensor  # (B, F+1, T) complex, same domain as the input spectrogram
    c_m: torch.Tensor  # (B, T', C)
    t_p: torch.Tensor  # (B, L)
    aux: dict = field(default_factory=dict)


def _pad_last(x, target, mode="reflect"):
    extra = target - x.shape[-1]
    if extra <= 0:
        return x
    if mode == "reflect" and extra >= x.shape[-1]:
        mode = "constant"
    # reflect padding only handles (N, C, L) when padding a single axis
    flat = x.reshape(-1, 1, x.shape[-1])
    return F.pad(flat, (0, extra), mode=mode).reshape(*x.shape[:-1], target)


class MDM(nn.Module):
    """Multi-view discriminative model.

    Inputs are the (compressed) noisy spectrogram ``s_n`` of shape
    ``(B, freq_bins + 1, T)`` and the noisy waveform ``t_n`` of shape ``(B, L)``
    with ``T == L // hop + 1``.
    """

    def __init__(self, cfg: MdmConfig | None = None):
        super().__init__()
        self.cfg = cfg = cfg or MdmConfig()
        self.npm = NoisePerception(cfg) if cfg.use_noise_branch else None
        self.freq_encoder = FreqEncoder(cfg)
        self.time_encoder = TimeEncoder(cfg) if cfg.use_time_branch else None
        self.fusion = ViewFusion(cfg.bottleneck_channels, cfg.fusion_heads)
        self.freq_decoder = FreqDecoder(cfg)
        self.time_decoder = TimeDecoder(cfg) if cfg.use_time_branch else None

    def check_inputs(self, s_n, t_n):
        cfg = self.cfg
        if s_n.shape[-2] != cfg.freq_bins + 1:
            raise ShapeError(f"expected {cfg.freq_bins + 1} frequency bins, got {s_n.shape[-2]}")
        frames, length = s_n.shape[-1], t_n.shape[-1]
        if length // cfg.hop + 1 != frames:
            raise InputError(f"{frames} frames inconsistent with {length} samples at hop {cfg.hop}")
        if frames < 2:
            raise ShapeError("need at least 2 frames")

    def forward(self, s_n: torch.Tensor, t_n: torch.Tensor) -> MdmOutput:
        cfg = self.cfg
        self.check_inputs(s_n, t_n)
        frames, length = s_n.shape[-1], t_n.shape[-1]
        steps = math.ceil(frames / 2)
        spec = s_n[:, : cfg.freq_bins]
        x = torch.view_as_real(spec).permute(0, 3, 1, 2)  # (B, 2, F, T)
        x = _pad_last(x, 2 * steps)

        modulation = None
        if self.npm is not None:
            modulation = self.npm(_pad_last(spec.abs(), 2 * steps))
        freq_b, freq_skips = self.freq_encoder(x, modulation)

        if self.time_encoder is not None:
            wave = _pad_last(t_n.unsqueeze(1), steps * cfg.samples_per_step)
            time_b, time_skips = self.time_encoder(wave)
        else:
            time_b = torch.zeros_like(freq_b)
        c_m, fusion_weights = self.fusion(freq_b, time_b)

        y = self.freq_decoder(c_m, freq_skips)[..., :frames]  # (B, 2, F, T)
        y = torch.complex(y[:, 0], y[:, 1])
        s_p = torch.cat([y, torch.zeros_like(y[:, :1])], dim=1)  # Nyquist row back as zeros

        if self.time_decoder is not None:
            t_p = self.time_decoder(c_m, time_skips)[:, 0, :length]
        else:
            t_p = torch.zeros_like(t_n)

        aux = {"fusion_weights": fusion_weights, "freq_bottleneck": freq_b, "time_bottleneck": time_b}
        if modulation is not None:
            aux["modulation"] = modulation
        return MdmOutput(s_p, c_m, t_p, aux)


def mdm_forward(model: MDM, s_n, t_n) -> MdmOutput:
    return model(s_n, t_n)
