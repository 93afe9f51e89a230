"""End-to-end acceptance checks, one test per criterion.

Each test prints a single ``criterion N: PASS|FAIL`` line (visible even
without ``-s``) and then asserts. Criterion 12 trains the desk profile and
takes over an hour on one CPU core.
"""
import json
import math
import time

import numpy as np
import pytest
import torch
from scipy.integrate import quad, solve_ivp

from _micro import micro_config
from _oracles import brownian_increments, coarsen, marginal, sample_toy
from mddm import synthetic
from mddm.data import (CONDITION_PROBS, CONDITIONS, make_example, measured_snr, mix_at_snr, random_rir_spec,
                       schroeder_t60, synth_rir)
from mddm.diffusion.sde import (SdeConfig, complex_normal, diffusion_coeff, dsm_loss, init_prior, mean, perturb,
                                std, step_time, variance)
from mddm.metrics import estoi, si_sdr
from mddm.nn.blocks import EncoderBlock, EncoderBlockConfig, MultiHeadAttention, grad_check
from mddm.nn.mdm import MDM, MdmConfig, NoisePerception, modulate
from mddm.signal import Waveform, compress_values, istft_tensor, stft_tensor
from mddm.train import (enhance, load_state, mean_si_sdr, mixture_si_sdr, save_state, synthetic_dataset, train_joint,
                        train_stage1)

SR = 24000
CFG = SdeConfig()


@pytest.fixture
def report(capsys):
    """``report(n, ok, detail, elapsed, budget)`` prints the criterion line and asserts."""

    def _report(n, ok, detail, elapsed, budget):
        in_time = elapsed <= budget
        status = "PASS" if ok and in_time else "FAIL"
        with capsys.disabled():
            print(f"\ncriterion {n}: {status} | {detail} | {elapsed:.1f} s (budget {budget:.0f} s)")
        assert ok, detail
        assert in_time, f"took {elapsed:.1f} s, budget {budget} s"

    return _report


def test_criterion_01_stft_round_trip(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(100):
        n = int(rng.uniform(0.25, 4.0) * SR)
        x = torch.from_numpy(rng.standard_normal(n))
        y = istft_tensor(stft_tensor(x[None]), n)[0]
        worst = max(worst, (torch.linalg.norm(y - x) / torch.linalg.norm(x)).item())
    report(1, worst <= 1e-6, f"max relative round-trip error {worst:.2e} (limit 1e-6)",
           time.perf_counter() - t0, 10)


def test_criterion_02_variance_ode(report):
    t0 = time.perf_counter()
    ts = np.linspace(0, 1, 100)
    sol = solve_ivp(lambda t, lam: -2 * CFG.stiffness * lam + diffusion_coeff(t) ** 2, (0, 1), [0.0],
                    method="DOP853", t_eval=ts, rtol=1e-12, atol=1e-18)
    closed = np.sqrt(variance(ts))
    numeric = np.sqrt(sol.y[0])
    rel = np.abs(closed[1:] / numeric[1:] - 1)
    ok = closed[0] == 0 and rel.max() <= 1e-6
    report(2, ok, f"max relative sigma deviation {rel.max():.2e} over 100 points (limit 1e-6)",
           time.perf_counter() - t0, 1)


def test_criterion_03_kernel_moments(report):
    t0 = time.perf_counter()
    gen = torch.Generator().manual_seed(3)
    n = 100_000
    s_c = torch.full((n,), 0.7 - 0.4j, dtype=torch.complex128)
    s_p = torch.full((n,), -0.2 + 0.1j, dtype=torch.complex128)
    lines, ok = [], True
    for t in (0.1, 0.5, 0.9):
        x = perturb(s_c, s_p, t, complex_normal((n,), gen, torch.complex128)).x_t
        mu = mean(s_c[:1], s_p[:1], t)[0]
        var = float(variance(t))
        for part, m in ((x.real, mu.real), (x.imag, mu.imag)):
            z = abs(part.mean().item() - m.item()) / (part.std().item() / math.sqrt(n))
            dv = abs(part.var().item() / var - 1)
            ok &= z <= 3 and dv <= 0.02
            lines.append(f"t={t}: {z:.2f} SE, var {dv:.3%}")
    report(3, ok, "; ".join(lines[::2]), time.perf_counter() - t0, 30)


def test_criterion_04_truncated_prior(report):
    t0 = time.perf_counter()
    s_p = complex_normal((4, 257, 50), torch.Generator().manual_seed(0))
    k0 = init_prior(s_p, 0, torch.Generator().manual_seed(1))
    ok = k0.x_t is s_p or torch.equal(k0.x_t, s_p)
    gen = torch.Generator().manual_seed(2)
    big = torch.full((200_000,), 0.3 + 0.1j, dtype=torch.complex128)
    devs = []
    for k in (30, 50):
        d = init_prior(big, k, gen).x_t - big
        target = float(std(step_time(k))) ** 2
        dev = max(abs(d.real.var().item() / target - 1), abs(d.imag.var().item() / target - 1))
        devs.append(dev)
        ok &= dev <= 0.02
    report(4, ok, f"k=0 bitwise; variance deviation k=30 {devs[0]:.3%}, k=50 {devs[1]:.3%} (limit 2%)",
           time.perf_counter() - t0, 30)


def test_criterion_05_analytic_sampler(report):
    t0 = time.perf_counter()
    n = 10_000
    start, fine = brownian_increments(n, 100, seed=11)
    x50 = sample_toy(n, 50, 0, noise=(start, coarsen(fine)))
    x100 = sample_toy(n, 100, 0, noise=(start, fine))
    mu, var = marginal(CFG.t_eps)
    dm = abs(x50.mean().item() / mu - 1)
    dv = abs(x50.var().item() / var - 1)
    se_mean = math.sqrt(var / n)
    se_var = var * math.sqrt(2 / (n - 1))
    dm_h = abs(x100.mean().item() - x50.mean().item())
    dv_h = abs(x100.var().item() - x50.var().item())
    ok = dm <= 0.02 and dv <= 0.05 and dm_h < se_mean and dv_h < se_var
    report(5, ok, f"mean {dm:.2%}, var {dv:.2%}; halving moves mean {dm_h / se_mean:.2f} SE, "
                  f"var {dv_h / se_var:.2f} SE", time.perf_counter() - t0, 120)


def test_criterion_06_dsm_optimum(report):
    t0 = time.perf_counter()
    gen = torch.Generator().manual_seed(6)
    shape = (4, 16, 8)
    s_c, s_p = complex_normal(shape, gen, torch.complex128), complex_normal(shape, gen, torch.complex128)
    t = CFG.t_eps + torch.rand(4, generator=gen, dtype=torch.float64) * (1 - CFG.t_eps)
    z = complex_normal(shape, gen, torch.complex128)
    sig = std(t).view(-1, 1, 1)
    oracle = dsm_loss(lambda *a: -z / sig, s_c, s_p, None, t=t, z=z).item()
    zero = lambda x, *a: torch.zeros_like(x)
    # stratified times keep the t-to-t spread of 1/sigma^2 out of the Monte-Carlo error
    n = 10_000
    u = (torch.arange(n, dtype=torch.float64) + torch.rand(n, generator=gen, dtype=torch.float64)) / n
    times = CFG.t_eps + u * (CFG.horizon - CFG.t_eps)
    x = complex_normal((1, 16, 8), gen, torch.complex128)
    losses = [dsm_loss(zero, x, x, None, gen, t=times[i:i + 1]).item() for i in range(n)]
    # E|z|^2 = 2 per complex element, so the expectation is the average of 2 / sigma(t)^2 over t
    expected = quad(lambda t: 2 / float(std(t)) ** 2, CFG.t_eps, CFG.horizon, limit=200)[0] / (CFG.horizon - CFG.t_eps)
    rel = abs(np.mean(losses) / expected - 1)
    ok = oracle <= 1e-10 and rel <= 0.03
    report(6, ok, f"oracle loss {oracle:.1e}; zero-network mean off the expectation by {rel:.2%} (limit 3%)",
           time.perf_counter() - t0, 60)


def _dsm_probe():
    lin = torch.nn.Linear(4, 4).double()

    class Probe(torch.nn.Module):
        def __init__(self):
            super().__init__()
            self.lin = lin

        def forward(self, sc_real):
            s_c = torch.view_as_complex(sc_real)

            def net(x_t, s_p, c_m, t):
                h = torch.view_as_real(x_t).reshape(x_t.shape[0], -1)
                return torch.view_as_complex(self.lin(h).reshape(*x_t.shape, 2).contiguous())

            return dsm_loss(net, s_c, torch.zeros_like(s_c), None, torch.Generator().manual_seed(7))

    return Probe()


def test_criterion_07_gradients(report):
    t0 = time.perf_counter()
    torch.manual_seed(7)
    d = torch.float64
    npm_cfg = MdmConfig(freq_bins=64, start_channels=8, tfgru_hidden=8, npm_channels=(2, 2, 2, 2),
                        npm_gru_hidden=4, template_dim=8, n_templates=4, npm_heads=2, mlp_hidden=8, fusion_heads=2)
    npm = NoisePerception(npm_cfg).double()
    with torch.no_grad():
        for mlp in (npm.gamma_mlp, npm.beta_mlp):
            mlp[-1].weight.normal_(0, 0.1)
    checks = {
        "encoder block": grad_check(EncoderBlock(EncoderBlockConfig(2, 4, kernel=(4, 3), stride=(2, 1))).double(),
                                    torch.randn(1, 2, 8, 6, dtype=d)),
        "modulation": grad_check(modulate, [torch.randn(1, 2, 3, 4, dtype=d), torch.randn(1, 4, 3, dtype=d),
                                            torch.randn(1, 4, 3, dtype=d)]),
        "NPM head": grad_check(lambda m: tuple(vars(npm(m)).values()), torch.rand(1, 64, 3, dtype=d) + 0.1),
        "attention": grad_check(MultiHeadAttention(8, 2).double(), [torch.randn(1, 3, 8, dtype=d) for _ in range(3)]),
        "dsm_loss": grad_check(_dsm_probe(), torch.randn(3, 2, 2, dtype=d)),
    }
    worst = max(checks.values())
    detail = ", ".join(f"{k} {v:.1e}" for k, v in checks.items())
    report(7, worst <= 1e-4, f"max relative error {detail} (limit 1e-4)", time.perf_counter() - t0, 300)


def test_criterion_08_modulation_oracle(report):
    t0 = time.perf_counter()
    e = torch.randn(2, 3, 5, 7, dtype=torch.float64)
    ident = torch.equal(modulate(e, torch.ones(2, 7, 5, dtype=torch.float64), torch.zeros(2, 7, 5,
                                                                                          dtype=torch.float64)), e)
    rng = np.random.default_rng(8)
    worst = 0.0
    for _ in range(10):
        b, c, f, t = rng.integers(1, 4), rng.integers(1, 5), rng.integers(1, 9), rng.integers(1, 9)
        en, g, be = rng.standard_normal((b, c, f, t)), rng.standard_normal((b, t, f)), rng.standard_normal((b, t, f))
        ref = np.empty_like(en)
        for i in range(b):
            for ch in range(c):
                for fi in range(f):
                    for ti in range(t):
                        ref[i, ch, fi, ti] = en[i, ch, fi, ti] * g[i, ti, fi] + be[i, ti, fi]
        out = modulate(*(torch.from_numpy(a) for a in (en, g, be))).numpy()
        worst = max(worst, float(np.max(np.abs(out - ref))))
    report(8, ident and worst <= 1e-7, f"identity exact={ident}; loop-oracle max error {worst:.1e} (limit 1e-7)",
           time.perf_counter() - t0, 5)


def test_criterion_09_shapes(report):
    t0 = time.perf_counter()
    torch.manual_seed(9)
    model = MDM(MdmConfig())
    ok, notes = True, []
    with torch.no_grad():
        for seconds in (0.3, 1.0, 2.7, 4.0):
            n = int(round(seconds * SR))
            x = 0.1 * torch.randn(1, n)
            s = compress_values(stft_tensor(x))
            out = model(s, x)
            fb, tb = out.aux["freq_bottleneck"], out.aux["time_bottleneck"]
            good = out.s_p.shape == s.shape and out.t_p.shape[-1] == n and fb.shape[-1] == tb.shape[-1]
            ok &= good
            notes.append(f"{seconds} s {'ok' if good else 'MISMATCH'}")
    report(9, ok, ", ".join(notes), time.perf_counter() - t0, 30)


def test_criterion_10_simulator(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(10)
    worst_snr = 0.0
    for _ in range(200):
        clean = rng.standard_normal(2000) * rng.uniform(0.01, 3)
        snr = rng.uniform(0, 20)
        res = mix_at_snr(clean, rng.standard_normal(int(rng.integers(500, 3000))), snr)
        worst_snr = max(worst_snr, abs(measured_snr(res.gain * clean, res.noise_component) - snr))
    noise_pool = [rng.standard_normal(4800)]
    rir_pool = [synth_rir(random_rir_spec(rng, t60=0.2), 0)]
    clean = synthetic.speech_like(0.1, rng)
    counts = dict.fromkeys(CONDITIONS, 0)
    n = 10_000
    for _ in range(n):
        counts[make_example(clean, noise_pool, rir_pool, rng).condition] += 1
    freq_ok = all(abs(counts[c] - n * p) <= 3 * math.sqrt(n * p * (1 - p)) for c, p in zip(CONDITIONS, CONDITION_PROBS))
    t60_dev = 0.0
    for t60 in (0.1, 0.25, 0.5, 0.75, 1.0):
        spec = random_rir_spec(np.random.default_rng(int(t60 * 1000)), t60=t60)
        t60_dev = max(t60_dev, abs(schroeder_t60(synth_rir(spec, 1), SR) / t60 - 1))
    ok = worst_snr <= 0.01 and freq_ok and t60_dev <= 0.15
    report(10, ok, f"SNR error {worst_snr:.1e} dB; conditions {counts}; worst T60 deviation {t60_dev:.1%}",
           time.perf_counter() - t0, 120)


def test_criterion_11_metrics(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(11)
    x, y = rng.standard_normal(8000), rng.standard_normal(8000)
    scale_ok = all(si_sdr(x, a * (x + y)) == pytest.approx(si_sdr(x, x + y), abs=1e-9) for a in (0.01, 2.0, 77.0))
    n = y - (y @ x) / (x @ x) * x
    n *= np.linalg.norm(x) / np.linalg.norm(n)
    ortho = si_sdr(x, x + n)
    speech = synthetic.speech_like(2.0, np.random.default_rng(12))
    self_score = estoi(speech, speech)
    means = []
    for snr in (-5, 0, 5, 10, 20):
        vals = []
        for trial in range(20):
            w = np.random.default_rng(1000 + trial).standard_normal(len(speech))
            w *= np.sqrt(np.mean(speech ** 2) / np.mean(w ** 2) / 10 ** (snr / 10))
            vals.append(estoi(speech, speech + w))
        means.append(float(np.mean(vals)))
    mono = all(b >= a for a, b in zip(means, means[1:]))
    ok = scale_ok and abs(ortho) <= 0.01 and self_score >= 0.99 and mono
    report(11, ok, f"scale invariant={scale_ok}; orthogonal {ortho:+.4f} dB; ESTOI self {self_score:.4f}; "
                   f"ESTOI vs SNR {[round(m, 3) for m in means]}", time.perf_counter() - t0, 120)


def test_criterion_13_determinism(report, tmp_path):
    t0 = time.perf_counter()
    cfg = micro_config(train__stage1_steps=1000, train__joint_steps=1000, train__checkpoint_every=10_000,
                       train__eval_every=10_000)
    data = synthetic_dataset(4, 0, 0.5, seed=0)
    losses = lambda s: [r["loss"] for r in s.history if "loss" in r]
    full = train_joint(train_stage1(cfg, data), cfg, data)
    part = train_joint(train_stage1(cfg, data), cfg, data, stop_at=1500)
    curve = losses(part)
    save_state(tmp_path / "cut.npz", part)
    resumed = train_joint(load_state(tmp_path / "cut.npz"), cfg, data)
    curve += losses(resumed)
    same_curve = curve == losses(full) and len(curve) == 2000
    a, b = full.parameters_snapshot(), resumed.parameters_snapshot()
    same_params = all(torch.equal(a[k], b[k]) for k in a)
    w = Waveform(data.train[0].mixture, SR)
    e1, e2 = enhance(w, 30, 5, full), enhance(w, 30, 5, resumed)
    same_enh = np.array_equal(e1.samples, e2.samples) and np.array_equal(e1.samples, enhance(w, 30, 5, full).samples)
    ok = same_curve and same_params and same_enh
    report(13, ok, f"2000-step curve bitwise={same_curve}; resumed parameters bitwise={same_params}; "
                   f"enhance bitwise={same_enh}", time.perf_counter() - t0, 1800)


@pytest.fixture(scope="module")
def desk_run(tmp_path_factory):
    """Train the desk profile once through the CLI; shared by the desk-scale checks."""
    from mddm.cli import main

    out = tmp_path_factory.mktemp("desk")
    t0 = time.perf_counter()
    code = main(["train", "--profile", "desk", "--synthetic", "10", "--synthetic-seconds", "1.0", "--out", str(out)])
    state = load_state(out / "checkpoints" / "latest.npz")
    data = synthetic_dataset(10, 0, 1.0, seed=state.cfg.seed)
    scores = {"mixture": mixture_si_sdr(data.train)}
    for k in (0, 10, 30):
        scores[k] = mean_si_sdr(state, data.train, k)
    log = [json.loads(line) for line in (out / "train_log.jsonl").read_text().splitlines()]
    return {"code": code, "state": state, "scores": scores, "log": log, "elapsed": time.perf_counter() - t0}


@pytest.mark.slow
def test_criterion_12_desk_run(report, desk_run):
    sc, state = desk_run["scores"], desk_run["state"]
    gain = sc[0] - sc["mixture"]
    ok = desk_run["code"] == 0 and state.stage == "done" and gain >= 5.0 and sc[30] >= sc[10] - 0.5
    report(12, ok, f"mixture {sc['mixture']:.2f} dB, MDM k=0 {sc[0]:.2f} dB (improvement {gain:+.2f}, need 5), "
                   f"k=10 {sc[10]:.2f} dB, k=30 {sc[30]:.2f} dB", desk_run["elapsed"], 7200)


@pytest.mark.slow
def test_desk_joint_dsm_halves(desk_run):
    dsm = [r["dsm"] for r in desk_run["log"] if r.get("stage") == "joint" and "dsm" in r]
    first, last = float(np.mean(dsm[:50])), float(np.mean(dsm[-50:]))
    assert last <= 0.5 * first, (first, last)
