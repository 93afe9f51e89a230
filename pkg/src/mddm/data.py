"""Mixture simulation: SNR-controlled mixing, shoebox RIRs, condition sampling, manifests.

Manifest format (JSON lines, one header line then one record per example)::

    {"format": "mddm-manifest", "version": 1, "seed": ..., "split_ratios": [...], "skipped": n}
    {"id": "...", "split": "train", "clean_path": "...", "clean_duration": 1.2,
     "noise_path": "..." | null, "noise_offset": int | null, "rir_seed": int | null,
     "t60": float | null, "condition": "noise-only" | "reverb-only" | "both",
     "snr_db": float | null, "crop_start": int, "seed": int}
"""
from __future__ import annotations

import json
import logging
import math
import os
import tempfile
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
import scipy.signal
from scipy.io import wavfile

from .errors import ConfigError, InputError, SpecError
from .signal import DEFAULT_SAMPLE_RATE, read_wav

log = logging.getLogger(__name__)

CONDITIONS = ("noise-only", "reverb-only", "both")
CONDITION_PROBS = (0.40, 0.30, 0.30)
SNR_RANGE = (0.0, 20.0)
T60_RANGE = (0.1, 1.0)
SPEED_OF_SOUND = 343.0
MANIFEST_FORMAT = "mddm-manifest"
MANIFEST_VERSION = 1
AUDIO_SUFFIXES = (".wav",)


# --- SNR mixing ----------------------------------------------------------------

def power(x) -> float:
    return float(np.mean(np.square(x)))


def fit_noise(noise: np.ndarray, length: int, offset: int = 0, sample_rate: int = DEFAULT_SAMPLE_RATE,
              fade: float = 0.01) -> np.ndarray:
    """Crop ``noise`` to ``length`` starting at ``offset``; loop with crossfades if too short."""
    base = np.asarray(noise, dtype=np.float64)
    if len(base) >= length + offset:
        return base[offset:offset + length]
    nf = min(int(fade * sample_rate), len(base) // 4)
    out = base[offset % len(base):]
    if len(out) <= nf:
        out = base
    ramp = np.linspace(0.0, 1.0, nf)
    while len(out) < length:
        if nf == 0:
            out = np.concatenate([out, base])
        else:
            head = out[-nf:] * (1 - ramp) + base[:nf] * ramp
            out = np.concatenate([out[:-nf], head, base[nf:]])
    return out[:length]


@dataclass
class MixResult:
    mixture: np.ndarray
    noise_scale: float
    gain: float
    noise_component: np.ndarray  # gain * noise_scale * noise


def mix_at_snr(clean, noise, snr_db: float, peak: float = 0.99) -> MixResult:
    """Scale ``noise`` to the requested SNR relative to ``clean`` and add.

    The result is peak-normalised to at most ``peak``; the applied ``gain``
    scales both components, so their power ratio is unaffected.
    """
    clean = np.asarray(clean, dtype=np.float64)
    noise = fit_noise(noise, len(clean))
    p_c, p_n = power(clean), power(noise)
    if p_c <= 0:
        raise InputError("clean signal is silent")
    if p_n <= 0:
        raise InputError("noise signal is silent")
    scale = math.sqrt(p_c / (p_n * 10.0 ** (snr_db / 10.0)))
    mix = clean + scale * noise
    top = np.max(np.abs(mix))
    gain = peak / top if top > peak else 1.0
    return MixResult(gain * mix, scale, gain, gain * scale * noise)


def measured_snr(clean, noise_component) -> float:
    return 10.0 * math.log10(power(clean) / power(noise_component))


# --- room impulse responses ----------------------------------------------------

@dataclass(frozen=True)
class RirSpec:
    t60: float
    room: tuple = (6.0, 5.0, 3.0)
    source: tuple = (2.0, 3.0, 1.5)
    mic: tuple = (4.0, 2.0, 1.2)
    sample_rate: int = DEFAULT_SAMPLE_RATE
    identity: bool = False  # t60 -> 0 limit: unit impulse

    def validate(self):
        if self.identity:
            return self
        if not T60_RANGE[0] <= self.t60 <= T60_RANGE[1]:
            raise SpecError(f"t60 {self.t60} outside {T60_RANGE}")
        room = np.asarray(self.room, dtype=float)
        for name in ("source", "mic"):
            p = np.asarray(getattr(self, name), dtype=float)
            if p.shape != (3,) or np.any(p <= 0) or np.any(p >= room):
                raise SpecError(f"{name} position {tuple(p)} outside room {tuple(room)}")
        return self


def random_rir_spec(rng: np.random.Generator, t60: float | None = None,
                    sample_rate: int = DEFAULT_SAMPLE_RATE) -> RirSpec:
    room = np.array([rng.uniform(4, 10), rng.uniform(3, 8), rng.uniform(2.5, 4)])
    margin = 0.5
    src = rng.uniform(margin, room - margin)
    while True:
        mic = rng.uniform(margin, room - margin)
        if np.linalg.norm(mic - src) > 0.5:
            break
    if t60 is None:
        t60 = rng.uniform(*T60_RANGE)
    return RirSpec(float(t60), tuple(float(v) for v in room.round(3)), tuple(float(v) for v in src.round(3)),
                   tuple(float(v) for v in mic.round(3)), sample_rate)


def schroeder_t60(h: np.ndarray, sample_rate: int, lo_db: float = -5.0, hi_db: float = -35.0) -> float:
    """T60 from a line fit to the Schroeder energy-decay curve between ``lo_db`` and ``hi_db``."""
    energy = np.cumsum(np.square(h)[::-1])[::-1]
    edc = 10.0 * np.log10(energy / energy[0] + 1e-300)
    idx = np.nonzero((edc <= lo_db) & (edc >= hi_db))[0]
    if len(idx) < 2:
        raise InputError("impulse response too short for a decay fit")
    slope, _ = np.polyfit(idx / sample_rate, edc[idx], 1)
    return -60.0 / slope


def _image_source(spec: RirSpec, beta: float, length: int, rng: np.random.Generator, jitter: float):
    sr = spec.sample_rate
    room = np.asarray(spec.room, dtype=float)
    src = np.asarray(spec.source, dtype=float)
    mic = np.asarray(spec.mic, dtype=float)
    max_dist = length / sr * SPEED_OF_SOUND
    n_max = np.ceil(max_dist / (2 * room)).astype(int) + 1
    grids = np.meshgrid(*[np.arange(-n, n + 1) for n in n_max], indexing="ij")
    n = np.stack([g.ravel() for g in grids], axis=1)  # (K, 3)
    h = np.zeros(length + 2)
    log_beta = math.log(beta)
    direct = np.linalg.norm(src - mic)
    for parity in np.ndindex(2, 2, 2):
        p = np.asarray(parity)
        pos = (1 - 2 * p) * src + 2 * n * room
        order = (np.abs(n - p) + np.abs(n)).sum(axis=1)
        d = np.linalg.norm(pos - mic, axis=1)
        if jitter > 0:
            # randomized image positions decorrelate the regular shoebox lattice
            d = np.where(order > 0, d + rng.uniform(-jitter, jitter, size=d.shape), d)
        keep = d < max_dist
        d, order = d[keep], order[keep]
        amp = np.exp(order * log_beta) / (4 * math.pi * d)
        delay = d / SPEED_OF_SOUND * sr
        i0 = np.floor(delay).astype(int)
        frac = delay - i0
        h += np.bincount(i0, amp * (1 - frac), minlength=len(h))[: len(h)]
        h += np.bincount(i0 + 1, amp * frac, minlength=len(h))[: len(h)]
    start = int(math.floor(direct / SPEED_OF_SOUND * sr))
    return h[start:length] * (4 * math.pi * direct)


def synth_rir(spec: RirSpec, seed: int = 0, tol: float = 0.03, max_iter: int = 8,
              jitter: float = 0.05) -> np.ndarray:
    """Shoebox image-source RIR with uniform wall reflection, calibrated to ``spec.t60``.

    The reflection coefficient starts from Eyring's formula and is refined until
    the Schroeder-integrated T60 is within ``tol`` (relative) of the target. The
    response is trimmed to start at the direct path, which has unit gain.
    """
    spec.validate()
    if spec.identity:
        return np.ones(1)
    sr = spec.sample_rate
    room = np.asarray(spec.room, dtype=float)
    volume = float(np.prod(room))
    surface = 2.0 * (room[0] * room[1] + room[0] * room[2] + room[1] * room[2])
    direct = np.linalg.norm(np.subtract(spec.source, spec.mic))
    length = int(math.ceil((direct / SPEED_OF_SOUND + spec.t60) * sr)) + 1
    log_beta = -0.0805 * volume / (surface * spec.t60)  # Eyring, pressure reflection
    best = None
    for _ in range(max_iter):
        rng = np.random.default_rng(seed)
        h = _image_source(spec, math.exp(log_beta), length, rng, jitter)
        measured = schroeder_t60(h, sr)
        err = measured / spec.t60 - 1.0
        if best is None or abs(err) < abs(best[1]):
            best = (h, err)
        if abs(err) <= tol:
            break
        log_beta *= measured / spec.t60
        log_beta = min(log_beta, -1e-4)
    return best[0]


@lru_cache(maxsize=256)
def rir_from_seed(rir_seed: int, sample_rate: int = DEFAULT_SAMPLE_RATE) -> tuple:
    """Deterministic random room for a seed; returns ``(rir, spec)`` (cached)."""
    spec = random_rir_spec(np.random.default_rng(rir_seed), sample_rate=sample_rate)
    rir = synth_rir(spec, rir_seed)
    rir.setflags(write=False)
    return rir, spec


def reverberate(clean: np.ndarray, rir: np.ndarray) -> np.ndarray:
    return scipy.signal.fftconvolve(clean, rir)[: len(clean)]


# --- examples ------------------------------------------------------------------

@dataclass
class MixtureExample:
    clean: np.ndarray  # dry target, after the mixture gain
    mixture: np.ndarray
    condition: str
    noise: np.ndarray | None = None  # noise component actually present in the mixture
    rir: np.ndarray | None = None
    snr_db: float | None = None
    gain: float = 1.0
    reverberant: np.ndarray | None = None  # speech component (reverberant or dry), after gain
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.condition not in CONDITIONS:
            raise InputError(f"unknown condition {self.condition!r}")
        has_noise = self.condition in ("noise-only", "both")
        has_rir = self.condition in ("reverb-only", "both")
        if has_noise != (self.noise is not None) or has_noise != (self.snr_db is not None):
            raise InputError(f"condition {self.condition} inconsistent with noise fields")
        if has_rir != (self.rir is not None):
            raise InputError(f"condition {self.condition} inconsistent with rir field")
        if len(self.mixture) != len(self.clean):
            raise InputError("mixture and clean lengths differ")


def render_example(clean, condition: str, noise=None, rir=None, snr_db=None, noise_offset: int = 0,
                   peak: float = 0.99, meta: dict | None = None) -> MixtureExample:
    clean = np.asarray(clean, dtype=np.float64)
    speech = reverberate(clean, rir) if condition in ("reverb-only", "both") else clean
    if condition in ("noise-only", "both"):
        noise_seg = fit_noise(noise, len(clean), noise_offset)
        res = mix_at_snr(speech, noise_seg, snr_db, peak)
        gain, mixture, noise_comp = res.gain, res.mixture, res.noise_component
    else:
        top = np.max(np.abs(speech))
        gain = peak / top if top > peak else 1.0
        mixture, noise_comp = gain * speech, None
    return MixtureExample(
        clean=gain * clean, mixture=mixture, condition=condition, noise=noise_comp,
        rir=rir if condition != "noise-only" else None,
        snr_db=snr_db if condition != "reverb-only" else None,
        gain=gain, reverberant=gain * speech, meta=meta or {},
    )


def draw_condition(rng: np.random.Generator) -> str:
    return CONDITIONS[rng.choice(len(CONDITIONS), p=CONDITION_PROBS)]


def make_example(clean, noise_pool, rir_pool, rng: np.random.Generator) -> MixtureExample:
    """Draw a condition (40/30/30), an RIR and/or noise clip and an SNR, and mix."""
    if not noise_pool or not rir_pool:
        raise ConfigError("noise and RIR pools must be non-empty")
    clean = np.asarray(clean, dtype=np.float64)
    condition = draw_condition(rng)
    rir = noise = snr = None
    offset = 0
    if condition in ("reverb-only", "both"):
        rir = rir_pool[rng.integers(len(rir_pool))]
    if condition in ("noise-only", "both"):
        noise = np.asarray(noise_pool[rng.integers(len(noise_pool))])
        offset = int(rng.integers(0, max(1, len(noise) - len(clean) + 1)))
        snr = float(rng.uniform(*SNR_RANGE))
    return render_example(clean, condition, noise, rir, snr, offset)


# --- manifests -----------------------------------------------------------------

def list_audio(directory) -> list[Path]:
    directory = Path(directory)
    if not directory.is_dir():
        raise InputError(f"not a directory: {directory}")
    return sorted(p for p in directory.rglob("*") if p.suffix.lower() in AUDIO_SUFFIXES and p.is_file())


def audio_duration(path) -> float:
    sr, data = wavfile.read(os.fspath(path), mmap=True)
    if len(data) == 0:
        raise InputError(f"{path}: empty audio")
    return len(data) / sr


def _split_counts(n, ratios):
    counts = [int(round(r * n)) for r in ratios]
    counts[0] += n - sum(counts)
    return counts


def _scan(paths):
    ok, skipped = [], 0
    for p in paths:
        try:
            ok.append((p, audio_duration(p)))
        except Exception as exc:  # unreadable files are skipped, not fatal
            log.warning("skipping unreadable audio %s: %s", p, exc)
            skipped += 1
    return ok, skipped


SPLITS = ("train", "val", "test")


def build_manifest(clean_dir, noise_dir, out_path, split_ratios=(0.8, 0.1, 0.1), seed: int = 0,
                   n_examples: int | None = None, crop_seconds: float = 2.0,
                   sample_rate: int = DEFAULT_SAMPLE_RATE) -> dict:
    """Partition clean files into splits, assign mixing conditions, write a JSONL manifest.

    Returns a summary dict (counts per split and condition, skipped file count).
    The file is written atomically; identical inputs and seed give identical bytes.
    """
    if len(split_ratios) != 3 or abs(sum(split_ratios) - 1.0) > 1e-9 or min(split_ratios) < 0:
        raise ConfigError(f"split ratios must be 3 non-negative values summing to 1, got {split_ratios}")
    clean, skipped_c = _scan(list_audio(clean_dir))
    noises, skipped_n = _scan(list_audio(noise_dir))
    if not clean:
        raise ConfigError(f"no readable clean audio in {clean_dir}")
    if not noises:
        raise ConfigError(f"no readable noise audio in {noise_dir}")
    rng = np.random.default_rng(seed)

    order = rng.permutation(len(clean))
    counts = _split_counts(len(clean), split_ratios)
    file_split = {}
    pos = 0
    for split, c in zip(SPLITS, counts):
        for i in order[pos:pos + c]:
            file_split[int(i)] = split
        pos += c

    active = [s for s, r in zip(SPLITS, split_ratios) if r > 0]
    noise_split = {s: list(range(len(noises))) for s in SPLITS}
    if len(noises) >= len(active):
        norder = rng.permutation(len(noises))
        ncounts = _split_counts(len(noises), split_ratios)
        # every active split keeps at least one noise file
        for j, s in enumerate(SPLITS):
            if s in active and ncounts[j] == 0:
                donor = int(np.argmax(ncounts))
                ncounts[donor] -= 1
                ncounts[j] += 1
        pos = 0
        for s, c in zip(SPLITS, ncounts):
            if c > 0:
                noise_split[s] = [int(k) for k in norder[pos:pos + c]]
            pos += c

    n_examples = len(clean) if n_examples is None else int(n_examples)
    crop_len = int(crop_seconds * sample_rate)
    records = []
    for i in range(n_examples):
        fi = int(order[i % len(clean)])
        path, dur = clean[fi]
        split = file_split[fi]
        ex_seed = int(rng.integers(2 ** 31))
        ex_rng = np.random.default_rng(ex_seed)
        condition = draw_condition(ex_rng)
        rec = {
            "id": f"{split}-{i:06d}",
            "split": split,
            "clean_path": str(path),
            "clean_duration": round(dur, 6),
            "noise_path": None,
            "noise_offset": None,
            "rir_seed": None,
            "condition": condition,
            "snr_db": None,
            "crop_start": 0,
            "seed": ex_seed,
        }
        rec["t60"] = None
        if condition != "noise-only":
            rec["rir_seed"] = int(ex_rng.integers(2 ** 31))
            rec["t60"] = round(random_rir_spec(np.random.default_rng(rec["rir_seed"])).t60, 6)
        if condition != "reverb-only":
            npath, ndur = noises[noise_split[split][int(ex_rng.integers(len(noise_split[split])))]]
            rec["noise_path"] = str(npath)
            n_len = int(ndur * sample_rate)
            c_len = int(dur * sample_rate)
            rec["noise_offset"] = int(ex_rng.integers(0, max(1, n_len - c_len + 1)))
            rec["snr_db"] = round(float(ex_rng.uniform(*SNR_RANGE)), 6)
        n_samples = int(round(dur * sample_rate))
        rec["crop_start"] = int(ex_rng.integers(0, max(1, n_samples - crop_len + 1)))
        records.append(rec)

    header = {"format": MANIFEST_FORMAT, "version": MANIFEST_VERSION, "seed": seed,
              "split_ratios": list(split_ratios), "skipped": skipped_c + skipped_n,
              "sample_rate": sample_rate}
    write_jsonl(out_path, [header] + records)
    summary = {
        "examples": len(records),
        "skipped": skipped_c + skipped_n,
        "splits": {s: sum(r["split"] == s for r in records) for s in SPLITS},
        "files": {s: sum(v == s for v in file_split.values()) for s in SPLITS},
        "conditions": {c: sum(r["condition"] == c for r in records) for c in CONDITIONS},
    }
    return summary


def write_jsonl(path, rows) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-")
    try:
        with os.fdopen(fd, "w") as fh:
            for row in rows:
                fh.write(json.dumps(row, sort_keys=True) + "\n")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_manifest(path) -> tuple[dict, list[dict]]:
    with open(path) as fh:
        rows = [json.loads(line) for line in fh if line.strip()]
    if not rows or rows[0].get("format") != MANIFEST_FORMAT:
        raise InputError(f"{path}: not an mddm manifest")
    if rows[0]["version"] > MANIFEST_VERSION:
        raise InputError(f"{path}: manifest version {rows[0]['version']} unsupported")
    return rows[0], rows[1:]


@lru_cache(maxsize=64)
def _load_audio(path: str, sample_rate: int) -> np.ndarray:
    x = read_wav(path, sample_rate).samples
    x.setflags(write=False)
    return x


def example_from_record(rec: dict, sample_rate: int = DEFAULT_SAMPLE_RATE) -> MixtureExample:
    """Rebuild a mixture exactly from its manifest row."""
    clean = _load_audio(rec["clean_path"], sample_rate)
    rir = noise = None
    if rec["rir_seed"] is not None:
        rir, _ = rir_from_seed(rec["rir_seed"], sample_rate)
    if rec["noise_path"] is not None:
        noise = _load_audio(rec["noise_path"], sample_rate)
    return render_example(clean, rec["condition"], noise, rir, rec["snr_db"], rec["noise_offset"] or 0,
                          meta={"id": rec["id"], "split": rec["split"]})
