"""Deterministic synthetic audio: speech-shaped signals and assorted noises.

Used for tests, demos and the desk-scale training runs when no corpus is
available. Everything is driven by a ``numpy.random.Generator``.
"""
from __future__ import annotations

import numpy as np
import scipy.signal

from .signal import DEFAULT_SAMPLE_RATE

# rough vowel formant table (F1, F2, F3) in Hz
_VOWELS = np.array([
    [730, 1090, 2440],
    [270, 2290, 3010],
    [530, 1840, 2480],
    [570, 840, 2410],
    [300, 870, 2240],
    [660, 1720, 2410],
    [490, 1350, 1690],
])


def _envelope(n, rng):
    attack = max(1, int(n * rng.uniform(0.1, 0.3)))
    release = max(1, int(n * rng.uniform(0.2, 0.4)))
    env = np.ones(n)
    env[:attack] = np.sin(0.5 * np.pi * np.linspace(0, 1, attack)) ** 2
    env[n - release:] = np.cos(0.5 * np.pi * np.linspace(0, 1, release)) ** 2
    return env


def _voiced(n, sr, rng, f0_base):
    t = np.arange(n) / sr
    f0 = f0_base * (1 + rng.uniform(-0.15, 0.15) * t / max(t[-1], 1e-3)) * (1 + 0.01 * np.sin(2 * np.pi * 5 * t))
    phase = 2 * np.pi * np.cumsum(f0) / sr
    formants = _VOWELS[rng.integers(len(_VOWELS))] * rng.uniform(0.9, 1.1)
    bandwidths = np.array([80.0, 120.0, 160.0])
    out = np.zeros(n)
    for k in range(1, int(0.45 * sr / f0_base)):
        fk = k * f0_base
        gain = sum(1.0 / (1.0 + ((fk - fm) / bw) ** 2) for fm, bw in zip(formants, bandwidths))
        gain *= 1.0 / k ** 0.7
        out += gain * np.sin(k * phase + rng.uniform(0, 2 * np.pi))
    return out


def _unvoiced(n, sr, rng):
    lo = rng.uniform(2000, 3500)
    hi = min(rng.uniform(5000, 8000), 0.45 * sr)
    sos = scipy.signal.butter(4, [lo, hi], btype="bandpass", fs=sr, output="sos")
    return 0.3 * scipy.signal.sosfilt(sos, rng.standard_normal(n))


def speech_like(duration: float, rng: np.random.Generator, sample_rate: int = DEFAULT_SAMPLE_RATE,
                rms: float = 0.05) -> np.ndarray:
    """Syllabic, formant-shaped harmonic signal with fricatives and pauses."""
    n = int(round(duration * sample_rate))
    out = np.zeros(n)
    f0_base = rng.uniform(90, 240)
    pos = int(rng.uniform(0.0, 0.08) * sample_rate)
    while pos < n:
        seg = int(rng.uniform(0.08, 0.25) * sample_rate)
        seg = min(seg, n - pos)
        if seg < 16:
            break
        if rng.random() < 0.8:
            piece = _voiced(seg, sample_rate, rng, f0_base * rng.uniform(0.9, 1.1))
        else:
            piece = _unvoiced(seg, sample_rate, rng)
        out[pos:pos + seg] += piece * _envelope(seg, rng) * rng.uniform(0.5, 1.0)
        pos += seg + int(rng.uniform(0.01, 0.12) * sample_rate)
    power = np.sqrt(np.mean(out ** 2))
    return out * (rms / power) if power > 0 else out


def noise(kind: str, duration: float, rng: np.random.Generator, sample_rate: int = DEFAULT_SAMPLE_RATE,
          rms: float = 0.05) -> np.ndarray:
    """Noise of a named ``kind``: white, pink, brown, babble, hum, modulated."""
    n = int(round(duration * sample_rate))
    if kind == "white":
        x = rng.standard_normal(n)
    elif kind in ("pink", "brown"):
        spec = np.fft.rfft(rng.standard_normal(n))
        f = np.fft.rfftfreq(n, 1 / sample_rate)
        f[0] = f[1]
        spec /= f ** (0.5 if kind == "pink" else 1.0)
        x = np.fft.irfft(spec, n)
    elif kind == "babble":
        x = sum(speech_like(duration, rng, sample_rate) for _ in range(6))
    elif kind == "hum":
        t = np.arange(n) / sample_rate
        f = rng.choice([50.0, 60.0])
        x = sum(np.sin(2 * np.pi * k * f * t + rng.uniform(0, 2 * np.pi)) / k for k in range(1, 8))
        x = x + 0.3 * rng.standard_normal(n)
    elif kind == "modulated":
        t = np.arange(n) / sample_rate
        mod = 0.5 * (1 + np.sin(2 * np.pi * rng.uniform(0.5, 4.0) * t)) ** 2
        x = rng.standard_normal(n) * mod
    else:
        raise ValueError(f"unknown noise kind {kind!r}")
    x = np.asarray(x, dtype=np.float64)
    return x * (rms / np.sqrt(np.mean(x ** 2)))


NOISE_KINDS = ("white", "pink", "brown", "babble", "hum", "modulated")
