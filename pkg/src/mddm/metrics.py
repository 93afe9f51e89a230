"""Objective metrics: SI-SDR and ESTOI, plus set-level evaluation against a manifest."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import example_from_record, read_manifest
from .errors import InputError
from .signal import DEFAULT_SAMPLE_RATE, read_wav, resample

SI_SDR_CAP = 100.0

# ESTOI constants (Jensen & Taal, 2016)
ESTOI_FS = 10000
ESTOI_FRAME = 256
ESTOI_NFFT = 512
ESTOI_HOP = 128
ESTOI_BANDS = 15
ESTOI_MIN_FREQ = 150.0
ESTOI_SEGMENT = 30
ESTOI_DYN_RANGE = 40.0
_EPS = np.finfo(np.float64).eps


def si_sdr(reference, estimate) -> float:
    """Scale-invariant SDR in dB, capped at +100 dB for a numerically exact estimate."""
    ref = np.asarray(reference, dtype=np.float64)
    est = np.asarray(estimate, dtype=np.float64)
    if ref.shape != est.shape:
        raise InputError(f"length mismatch: {ref.shape} vs {est.shape}")
    ref_energy = np.dot(ref, ref)
    if ref_energy <= 0:
        raise InputError("reference is silent")
    alpha = np.dot(est, ref) / ref_energy
    target = alpha * ref
    residual = target - est
    res_energy = np.dot(residual, residual)
    tgt_energy = np.dot(target, target)
    if res_energy <= tgt_energy * 10 ** (-SI_SDR_CAP / 10):
        return SI_SDR_CAP
    return float(10 * np.log10(tgt_energy / res_energy))


def _third_octave_matrix(fs=ESTOI_FS, nfft=ESTOI_NFFT, bands=ESTOI_BANDS, min_freq=ESTOI_MIN_FREQ):
    f = np.linspace(0, fs, nfft + 1)[: nfft // 2 + 1]
    k = np.arange(bands, dtype=float)
    lo = min_freq * 2.0 ** ((2 * k - 1) / 6)
    hi = min_freq * 2.0 ** ((2 * k + 1) / 6)
    obm = np.zeros((bands, len(f)))
    for i in range(bands):
        a = int(np.argmin((f - lo[i]) ** 2))
        b = int(np.argmin((f - hi[i]) ** 2))
        obm[i, a:b] = 1.0
    return obm


def _frames(x, frame=ESTOI_FRAME, hop=ESTOI_HOP):
    n = 1 + (len(x) - frame) // hop if len(x) >= frame else 0
    idx = np.arange(frame)[None, :] + hop * np.arange(n)[:, None]
    return x[idx]


def _window():
    return np.hanning(ESTOI_FRAME + 2)[1:-1]


def remove_silent_frames(x, y, dyn_range=ESTOI_DYN_RANGE):
    """Drop frames of ``x`` more than ``dyn_range`` dB below its loudest frame (same frames from ``y``)."""
    w = _window()
    xf, yf = _frames(x) * w, _frames(y) * w
    if len(xf) == 0:
        return x[:0], y[:0]
    energy = 20 * np.log10(np.linalg.norm(xf, axis=1) + _EPS)
    keep = energy > energy.max() - dyn_range
    return _overlap_add(xf[keep]), _overlap_add(yf[keep])


def _overlap_add(frames):
    if len(frames) == 0:
        return np.zeros(0)
    n = (len(frames) - 1) * ESTOI_HOP + ESTOI_FRAME
    out = np.zeros(n)
    for i, fr in enumerate(frames):
        out[i * ESTOI_HOP: i * ESTOI_HOP + ESTOI_FRAME] += fr
    return out


def _band_envelopes(x):
    spec = np.fft.rfft(_frames(x) * _window(), n=ESTOI_NFFT, axis=1).T  # (bins, frames)
    return np.sqrt(_third_octave_matrix() @ np.abs(spec) ** 2)


def estoi(reference, estimate, sample_rate: int = DEFAULT_SAMPLE_RATE) -> float:
    """Extended short-time objective intelligibility.

    Signals are resampled to 10 kHz, silent frames (40 dB below the loudest
    reference frame) are removed, and one-third-octave band envelopes are
    compared over 30-frame segments after row and column normalisation.
    """
    x = np.asarray(reference, dtype=np.float64)
    y = np.asarray(estimate, dtype=np.float64)
    if x.shape != y.shape:
        raise InputError(f"length mismatch: {x.shape} vs {y.shape}")
    if sample_rate != ESTOI_FS:
        x, y = resample(x, sample_rate, ESTOI_FS), resample(y, sample_rate, ESTOI_FS)
    x, y = remove_silent_frames(x, y)
    x_env, y_env = _band_envelopes(x), _band_envelopes(y)
    n_frames = x_env.shape[1]
    if n_frames < ESTOI_SEGMENT:
        raise InputError(f"need >= {ESTOI_SEGMENT} speech-active frames (about 384 ms), got {n_frames}")
    starts = np.arange(n_frames - ESTOI_SEGMENT + 1)
    idx = starts[:, None] + np.arange(ESTOI_SEGMENT)[None, :]
    xs = x_env[:, idx].transpose(1, 0, 2)  # (segments, bands, frames)
    ys = y_env[:, idx].transpose(1, 0, 2)

    def normalise(s):
        s = s - s.mean(axis=2, keepdims=True)
        s = s / (np.linalg.norm(s, axis=2, keepdims=True) + _EPS)
        s = s - s.mean(axis=1, keepdims=True)
        return s / (np.linalg.norm(s, axis=1, keepdims=True) + _EPS)

    corr = (normalise(xs) * normalise(ys)).sum(axis=1)  # (segments, frames)
    return float(corr.mean())


@dataclass
class MetricReport:
    rows: list = field(default_factory=list)  # dicts: id, si_sdr_db, estoi, duration
    missing: list = field(default_factory=list)

    @staticmethod
    def _aggregate(values):
        vals = np.array([v for v in values if v is not None and np.isfinite(v)], dtype=float)
        if len(vals) == 0:
            return {"mean": None, "ci95": None, "n": 0}
        half = 1.96 * vals.std(ddof=1) / math.sqrt(len(vals)) if len(vals) > 1 else 0.0
        return {"mean": float(vals.mean()), "ci95": float(half), "n": int(len(vals))}

    @property
    def aggregates(self) -> dict:
        return {
            "si_sdr_db": self._aggregate(r["si_sdr_db"] for r in self.rows),
            "estoi": self._aggregate(r["estoi"] for r in self.rows),
        }

    def to_records(self) -> list[dict]:
        out = [dict(r, kind="utterance") for r in self.rows]
        out += [{"kind": "missing", "id": m} for m in self.missing]
        out.append({"kind": "aggregate", **self.aggregates, "missing": len(self.missing)})
        return out

    def write(self, path) -> None:
        with open(path, "w") as fh:
            for rec in self.to_records():
                fh.write(json.dumps(rec, sort_keys=True) + "\n")

    def table(self) -> str:
        lines = [f"{'id':<24} {'SI-SDR [dB]':>12} {'ESTOI':>8} {'dur [s]':>8}"]
        for r in self.rows:
            est = "n/a" if r["estoi"] is None else f"{r['estoi']:.3f}"
            lines.append(f"{r['id']:<24} {r['si_sdr_db']:>12.2f} {est:>8} {r['duration']:>8.2f}")
        agg = self.aggregates
        for key, label in (("si_sdr_db", "SI-SDR"), ("estoi", "ESTOI")):
            a = agg[key]
            if a["mean"] is not None:
                lines.append(f"mean {label}: {a['mean']:.3f} +/- {a['ci95']:.3f} (n={a['n']})")
        if self.missing:
            lines.append(f"missing outputs: {len(self.missing)}")
        return "\n".join(lines)


def score_pair(ref, est, sample_rate=DEFAULT_SAMPLE_RATE) -> tuple[float, float | None]:
    n = min(len(ref), len(est))
    s = si_sdr(ref[:n], est[:n])
    try:
        e = estoi(ref[:n], est[:n], sample_rate)
    except InputError:
        e = None
    return s, e


def evaluate_set(manifest, output_dir, split: str | None = None,
                 sample_rate: int = DEFAULT_SAMPLE_RATE) -> MetricReport:
    """Score ``{output_dir}/{id}.wav`` against each manifest row's clean target.

    Rows are processed in sorted id order so the report is independent of the
    manifest's row order.
    """
    _, records = read_manifest(manifest)
    if split is not None:
        records = [r for r in records if r["split"] == split]
    report = MetricReport()
    for rec in sorted(records, key=lambda r: r["id"]):
        path = Path(output_dir) / f"{rec['id']}.wav"
        if not path.exists():
            report.missing.append(rec["id"])
            continue
        ex = example_from_record(rec, sample_rate)
        est = read_wav(path, sample_rate).samples
        s, e = score_pair(ex.clean, est, sample_rate)
        report.rows.append({"id": rec["id"], "si_sdr_db": s, "estoi": e, "duration": len(ex.clean) / sample_rate})
    return report
