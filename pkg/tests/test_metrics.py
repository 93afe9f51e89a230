import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mddm import synthetic
from mddm.data import build_manifest, example_from_record, read_manifest, write_jsonl
from mddm.errors import InputError
from mddm.metrics import (ESTOI_BANDS, MetricReport, _third_octave_matrix, estoi, evaluate_set, remove_silent_frames,
                          si_sdr)
from mddm.signal import write_wav

SR = 24000


@pytest.fixture(scope="module")
def speech():
    return synthetic.speech_like(2.0, np.random.default_rng(5))


def test_si_sdr_cap_and_scale(rng):
    x = rng.standard_normal(1000)
    assert si_sdr(x, x) == 100.0
    assert si_sdr(x, 2 * x) == 100.0
    n = rng.standard_normal(1000)
    assert si_sdr(x, 3.7 * (x + n)) == pytest.approx(si_sdr(x, x + n), abs=1e-10)


def test_si_sdr_orthogonal_equal_power(rng):
    x = rng.standard_normal(4096)
    n = rng.standard_normal(4096)
    n -= n @ x / (x @ x) * x
    n *= np.linalg.norm(x) / np.linalg.norm(n)
    assert abs(si_sdr(x, x + n)) < 0.01


@settings(max_examples=30)
@given(seed=st.integers(0, 2 ** 16), scale=st.floats(0.01, 100))
def test_si_sdr_scale_invariance_property(seed, scale):
    r = np.random.default_rng(seed)
    x, y = r.standard_normal(512), r.standard_normal(512)
    assert si_sdr(x, scale * y) == pytest.approx(si_sdr(x, y), abs=1e-9)


def test_si_sdr_monotone_in_noise_level(rng):
    x, n = rng.standard_normal(2048), rng.standard_normal(2048)
    vals = [si_sdr(x, 0.8 * x + a * n) for a in (0.01, 0.1, 0.5, 1.0, 3.0)]
    assert all(a > b for a, b in zip(vals, vals[1:]))


def test_si_sdr_errors(rng):
    with pytest.raises(InputError):
        si_sdr(np.zeros(10), rng.standard_normal(10))
    with pytest.raises(InputError):
        si_sdr(np.ones(10), np.ones(11))


def test_third_octave_bands():
    obm = _third_octave_matrix()
    assert obm.shape == (ESTOI_BANDS, 257)
    assert np.all(obm.sum(axis=0) <= 1)  # bands do not overlap
    assert np.all(obm.sum(axis=1) >= 1)


def test_silent_frame_removal_drops_quiet_part(rng):
    x = np.concatenate([rng.standard_normal(5000), 1e-4 * rng.standard_normal(5000)])
    kept, _ = remove_silent_frames(x, x)
    assert 4500 < len(kept) < 5600


def test_estoi_self(speech):
    assert estoi(speech, speech) >= 0.99


def test_estoi_white_noise(speech):
    scores = [estoi(speech, np.random.default_rng(i).standard_normal(len(speech))) for i in range(20)]
    assert np.mean(scores) <= 0.1


def test_estoi_monotone_in_snr(speech):
    means = []
    for snr in (-5, 0, 5, 10, 20):
        vals = []
        for trial in range(20):
            n = np.random.default_rng(100 + trial).standard_normal(len(speech))
            n *= np.sqrt(np.mean(speech ** 2) / np.mean(n ** 2) / 10 ** (snr / 10))
            vals.append(estoi(speech, speech + n))
        means.append(np.mean(vals))
    assert all(b >= a for a, b in zip(means, means[1:])), means


@pytest.mark.parametrize("seed", range(4))
def test_estoi_gain_invariance(speech, seed):
    r = np.random.default_rng(seed)
    est = speech + 0.5 * np.std(speech) * r.standard_normal(len(speech))
    ga, gb = r.uniform(0.1, 10, size=2)
    assert estoi(ga * speech, gb * est) == pytest.approx(estoi(speech, est), abs=1e-6)


def test_estoi_too_short(speech):
    with pytest.raises(InputError):
        estoi(speech[:4000], speech[:4000])
    with pytest.raises(InputError):
        estoi(speech, speech[:-1])


def test_report_aggregates():
    rep = MetricReport(rows=[{"id": "a", "si_sdr_db": 1.0, "estoi": 0.5, "duration": 1.0},
                             {"id": "b", "si_sdr_db": 3.0, "estoi": None, "duration": 1.0}], missing=["c"])
    agg = rep.aggregates
    assert agg["si_sdr_db"]["mean"] == 2.0
    assert agg["si_sdr_db"]["ci95"] == pytest.approx(1.96 * np.std([1.0, 3.0], ddof=1) / np.sqrt(2))
    assert agg["estoi"] == {"mean": 0.5, "ci95": 0.0, "n": 1}
    recs = rep.to_records()
    assert [r["kind"] for r in recs] == ["utterance", "utterance", "missing", "aggregate"]
    assert "missing outputs: 1" in rep.table()


@pytest.fixture(scope="module")
def scored_set(tmp_path_factory):
    root = tmp_path_factory.mktemp("set")
    r = np.random.default_rng(2)
    for d in ("clean", "noise", "ref", "mix"):
        (root / d).mkdir()
    for i in range(4):
        write_wav(root / "clean" / f"c{i}.wav", synthetic.speech_like(1.2, r), SR)
    write_wav(root / "noise" / "n.wav", synthetic.noise("pink", 2.0, r), SR)
    build_manifest(root / "clean", root / "noise", root / "m.jsonl", split_ratios=(1.0, 0.0, 0.0), seed=0)
    _, rows = read_manifest(root / "m.jsonl")
    for rec in rows:
        ex = example_from_record(rec)
        write_wav(root / "ref" / f"{rec['id']}.wav", ex.clean, SR)
        write_wav(root / "mix" / f"{rec['id']}.wav", ex.mixture, SR)
    return root


def test_evaluate_references(scored_set):
    rep = evaluate_set(scored_set / "m.jsonl", scored_set / "ref")
    agg = rep.aggregates
    assert agg["si_sdr_db"]["mean"] > 90  # float32 WAV quantisation keeps this just below the cap
    assert agg["estoi"]["mean"] >= 0.99
    assert [r["id"] for r in rep.rows] == sorted(r["id"] for r in rep.rows)


def test_evaluate_mixture_rows(scored_set):
    rep = evaluate_set(scored_set / "m.jsonl", scored_set / "mix")
    _, rows = read_manifest(scored_set / "m.jsonl")
    direct = np.mean([si_sdr(example_from_record(r).clean, example_from_record(r).mixture) for r in rows])
    assert rep.aggregates["si_sdr_db"]["mean"] == pytest.approx(direct, abs=1e-3)


def test_evaluate_shuffled_manifest(scored_set, tmp_path):
    header, rows = read_manifest(scored_set / "m.jsonl")
    write_jsonl(tmp_path / "shuffled.jsonl", [header] + rows[::-1])
    a = evaluate_set(scored_set / "m.jsonl", scored_set / "mix")
    b = evaluate_set(tmp_path / "shuffled.jsonl", scored_set / "mix")
    assert a.aggregates == b.aggregates and a.rows == b.rows


def test_evaluate_missing_output(scored_set, tmp_path):
    out = tmp_path / "partial"
    out.mkdir()
    _, rows = read_manifest(scored_set / "m.jsonl")
    for rec in rows[1:]:
        (out / f"{rec['id']}.wav").write_bytes((scored_set / "ref" / f"{rec['id']}.wav").read_bytes())
    rep = evaluate_set(scored_set / "m.jsonl", out)
    assert rep.missing == [rows[0]["id"]]
    assert rep.aggregates["si_sdr_db"]["n"] == len(rows) - 1
    rep.write(tmp_path / "r.jsonl")
    recs = [json.loads(line) for line in open(tmp_path / "r.jsonl")]
    assert recs[-1]["missing"] == 1
