"""Waveform <-> complex spectrogram conversion and amplitude compression.

The numpy-facing functions (``stft``, ``istft``, ``compress``, ``decompress``)
work on the :class:`Waveform` / :class:`ComplexSpectrogram` containers. The
``*_tensor`` variants operate on batched torch tensors and are what the
networks and the training loop use; both routes share the same window and
framing so results agree to float precision.
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field, replace
from functools import lru_cache
from pathlib import Path

import numpy as np
import scipy.signal
import torch
from scipy.io import wavfile

from .errors import ConfigError, InputError, StateError

DEFAULT_SAMPLE_RATE = 24000
SPEC_FORMAT = "mddm-spectrogram"
SPEC_VERSION = 1


@dataclass(frozen=True)
class StftConfig:
    fft_len: int = 512
    hop: int = 128
    win_len: int = 512
    window: str = "hann"
    center: bool = True

    @property
    def freq_bins(self) -> int:
        return self.fft_len // 2 + 1

    def validate(self) -> "StftConfig":
        if self.win_len > self.fft_len:
            raise ConfigError(f"win_len {self.win_len} > fft_len {self.fft_len}")
        if not 0 < self.hop <= self.win_len:
            raise ConfigError(f"hop {self.hop} must be in (0, win_len]")
        if not scipy.signal.check_COLA(_window_np(self.window, self.win_len), self.win_len,
                                       self.win_len - self.hop):
            raise ConfigError(f"{self.window} window of length {self.win_len} is not COLA at hop {self.hop}")
        return self

    def num_frames(self, n_samples: int) -> int:
        if self.center:
            return n_samples // self.hop + 1
        return 1 + (n_samples - self.fft_len) // self.hop


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise InputError("waveform must be mono (1-D)")
        if self.sample_rate <= 0:
            raise InputError("sample_rate must be positive")
        if not np.all(np.isfinite(self.samples)):
            raise InputError("waveform contains non-finite samples")

    def __len__(self):
        return len(self.samples)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass
class ComplexSpectrogram:
    values: np.ndarray  # [freq_bins, frames], complex
    config: StftConfig = field(default_factory=StftConfig)
    sample_rate: int = DEFAULT_SAMPLE_RATE
    compressed: bool = False

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.complex128)
        if self.values.ndim != 2 or self.values.shape[0] != self.config.freq_bins:
            raise InputError(f"expected [{self.config.freq_bins} x frames] grid, got {self.values.shape}")

    @property
    def shape(self):
        return self.values.shape

    @property
    def frames(self) -> int:
        return self.values.shape[1]


@lru_cache(maxsize=16)
def _window_np(name: str, win_len: int) -> np.ndarray:
    # fftbins=True gives the periodic variant
    return scipy.signal.get_window(name, win_len, fftbins=True)


def window_tensor(cfg: StftConfig, dtype=torch.float64, device=None) -> torch.Tensor:
    return torch.as_tensor(_window_np(cfg.window, cfg.win_len), dtype=dtype, device=device)


def _as_samples(w) -> tuple[np.ndarray, int]:
    if isinstance(w, Waveform):
        return w.samples, w.sample_rate
    return np.asarray(w, dtype=np.float64), DEFAULT_SAMPLE_RATE


def stft_tensor(x: torch.Tensor, cfg: StftConfig = StftConfig()) -> torch.Tensor:
    """Batched STFT: ``(..., samples)`` real -> ``(..., freq_bins, frames)`` complex."""
    if x.shape[-1] == 0:
        raise InputError("empty waveform")
    lead = x.shape[:-1]
    x2 = x.reshape(-1, x.shape[-1])
    pad_mode = "reflect" if x.shape[-1] > cfg.fft_len // 2 else "constant"
    spec = torch.stft(x2, n_fft=cfg.fft_len, hop_length=cfg.hop, win_length=cfg.win_len,
                      window=window_tensor(cfg, x.dtype, x.device), center=cfg.center,
                      pad_mode=pad_mode, return_complex=True)
    return spec.reshape(*lead, *spec.shape[-2:])


def istft_tensor(spec: torch.Tensor, length: int, cfg: StftConfig = StftConfig()) -> torch.Tensor:
    """Inverse of :func:`stft_tensor`, cropped/padded to ``length`` samples."""
    lead = spec.shape[:-2]
    s2 = spec.reshape(-1, *spec.shape[-2:])
    real_dtype = torch.float64 if s2.dtype == torch.complex128 else torch.float32
    out = torch.istft(s2, n_fft=cfg.fft_len, hop_length=cfg.hop, win_length=cfg.win_len,
                      window=window_tensor(cfg, real_dtype, spec.device), center=cfg.center,
                      length=length)
    return out.reshape(*lead, length)


def stft(w, cfg: StftConfig = StftConfig()) -> ComplexSpectrogram:
    cfg.validate()
    samples, sr = _as_samples(w)
    if samples.size == 0:
        raise InputError("empty waveform")
    spec = stft_tensor(torch.from_numpy(np.ascontiguousarray(samples)), cfg)
    return ComplexSpectrogram(spec.numpy(), cfg, sr, compressed=False)


def istft(s: ComplexSpectrogram, out_len: int) -> Waveform:
    if s.compressed:
        raise StateError("spectrogram is compressed; decompress before istft")
    cfg = s.config
    if cfg.num_frames(out_len) != s.frames:
        raise InputError(f"out_len {out_len} implies {cfg.num_frames(out_len)} frames, got {s.frames}")
    x = istft_tensor(torch.from_numpy(s.values), out_len, cfg)
    return Waveform(x.numpy(), s.sample_rate)


def _check_exponent(a, scale):
    if a <= 0:
        raise ConfigError(f"compression exponent must be > 0, got {a}")
    if scale <= 0:
        raise ConfigError(f"compression scale must be > 0, got {scale}")


def compress_values(v, a: float = 0.5, scale: float = 0.15):
    """``v -> scale * |v|**a * exp(i arg v)``; works on numpy arrays and torch tensors."""
    _check_exponent(a, scale)
    if a == 1 and scale == 1:
        return v
    if isinstance(v, torch.Tensor):
        mag = v.abs()
        return torch.polar(scale * mag.pow(a), torch.angle(v))
    mag = np.abs(v)
    return scale * mag ** a * np.exp(1j * np.angle(v))


def decompress_values(v, a: float = 0.5, scale: float = 0.15):
    _check_exponent(a, scale)
    if a == 1 and scale == 1:
        return v
    if isinstance(v, torch.Tensor):
        mag = v.abs()
        return torch.polar((mag / scale).pow(1.0 / a), torch.angle(v))
    mag = np.abs(v)
    return (mag / scale) ** (1.0 / a) * np.exp(1j * np.angle(v))


def compress(s: ComplexSpectrogram, a: float = 0.5, scale: float = 0.15) -> ComplexSpectrogram:
    _check_exponent(a, scale)
    if s.compressed:
        raise StateError("spectrogram is already compressed")
    return replace(s, values=compress_values(s.values, a, scale), compressed=True)


def decompress(s: ComplexSpectrogram, a: float = 0.5, scale: float = 0.15) -> ComplexSpectrogram:
    _check_exponent(a, scale)
    if not s.compressed:
        raise StateError("spectrogram is not compressed")
    return replace(s, values=decompress_values(s.values, a, scale), compressed=False)


# --- audio I/O ---------------------------------------------------------------

def resample(x: np.ndarray, sr_in: int, sr_out: int, taps_per_phase: int = 64) -> np.ndarray:
    """Polyphase windowed-sinc resampling."""
    if sr_in == sr_out:
        return np.asarray(x, dtype=np.float64)
    g = math.gcd(sr_in, sr_out)
    up, down = sr_out // g, sr_in // g
    n = taps_per_phase * max(up, down) + 1
    h = scipy.signal.firwin(n, 1.0 / max(up, down), window=("kaiser", 8.0))
    return scipy.signal.resample_poly(np.asarray(x, dtype=np.float64), up, down, window=h)


def read_wav(path, target_rate: int | None = DEFAULT_SAMPLE_RATE) -> Waveform:
    """Read a mono WAV (16-bit PCM or float). Multi-channel files are averaged."""
    sr, data = wavfile.read(os.fspath(path))
    if data.dtype == np.int16:
        x = data.astype(np.float64) / 32768.0
    elif data.dtype == np.int32:
        x = data.astype(np.float64) / 2147483648.0
    elif data.dtype == np.uint8:
        x = (data.astype(np.float64) - 128.0) / 128.0
    else:
        x = data.astype(np.float64)
    if x.ndim == 2:
        x = x.mean(axis=1)
    if target_rate is not None and sr != target_rate:
        x = resample(x, sr, target_rate)
        sr = target_rate
    return Waveform(x, sr)


def write_wav(path, w, sample_rate: int | None = None, subtype: str = "float32") -> None:
    samples, sr = _as_samples(w)
    if sample_rate is not None:
        sr = sample_rate
    if subtype == "float32":
        data = samples.astype(np.float32)
    elif subtype == "pcm16":
        data = np.round(np.clip(samples, -1.0, 32767 / 32768) * 32768.0).astype(np.int16)
    else:
        raise ConfigError(f"unknown WAV subtype {subtype!r}")
    os.makedirs(os.path.dirname(os.fspath(path)) or ".", exist_ok=True)
    wavfile.write(os.fspath(path), sr, data)


def save_spectrogram(path, s: ComplexSpectrogram, **extra) -> None:
    header = {
        "format": SPEC_FORMAT,
        "version": SPEC_VERSION,
        "shape": list(s.values.shape),
        "config": asdict(s.config),
        "sample_rate": s.sample_rate,
        "compressed": s.compressed,
        **extra,
    }
    with open(path, "wb") as fh:
        np.savez(fh, header=np.array(json.dumps(header)), values=s.values)


def load_spectrogram(path) -> ComplexSpectrogram:
    with np.load(Path(path), allow_pickle=False) as data:
        header = json.loads(str(data["header"]))
        if header.get("format") != SPEC_FORMAT:
            raise InputError(f"{path}: not a spectrogram container")
        if header["version"] > SPEC_VERSION:
            raise InputError(f"{path}: unsupported container version {header['version']}")
        values = data["values"]
    if list(values.shape) != header["shape"]:
        raise InputError(f"{path}: shape mismatch between header and payload")
    return ComplexSpectrogram(values, StftConfig(**header["config"]), header["sample_rate"],
                              header["compressed"])
