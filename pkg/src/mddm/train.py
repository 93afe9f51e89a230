"""Two-stage training (discriminative pretraining, then joint MDM + score training) and inference.

Everything that affects the trajectory lives in :class:`TrainState`: both
networks, the Adam moments, the EMA copy of the score network, the step
counters and the data / noise RNG states. Saving and reloading a state
therefore continues training bit-for-bit.
"""
from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .config import TrainConfig, config_from_dict, config_to_dict
from .data import example_from_record, make_example, random_rir_spec, read_manifest, synth_rir
from .diffusion.sampling import reverse_sample
from .diffusion.score_net import ScoreNetwork
from .diffusion.sde import dsm_loss, init_prior
from .errors import ConfigError, ShapeError, StateError, TrainingDiverged
from .metrics import si_sdr
from .nn.checkpoint import load_arrays, save_arrays
from .nn.mdm import MDM, MdmOutput
from .signal import DEFAULT_SAMPLE_RATE, Waveform, compress_values, decompress_values, istft_tensor, stft_tensor
from .synthetic import NOISE_KINDS, noise, speech_like

log = logging.getLogger(__name__)

STAGES = ("init", "disc", "joint", "done")


# --- data ------------------------------------------------------------------------

@dataclass
class TrainData:
    train: list
    val: list = field(default_factory=list)
    sample_rate: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        if not self.train:
            raise ConfigError("training set is empty")


def synthetic_dataset(n_train: int = 10, n_val: int = 0, duration: float = 1.0, seed: int = 0,
                      sample_rate: int = DEFAULT_SAMPLE_RATE, n_rirs: int = 4) -> TrainData:
    """Speech-like utterances mixed with synthetic noise and image-source RIRs."""
    rng = np.random.default_rng(seed)
    noise_pool = [noise(NOISE_KINDS[i % len(NOISE_KINDS)], duration * 2, rng, sample_rate) for i in range(6)]
    rir_pool = []
    for i in range(n_rirs):
        spec = random_rir_spec(np.random.default_rng([seed, i]), t60=float(rng.uniform(0.2, 0.6)))
        rir_pool.append(synth_rir(spec, seed=i))
    examples = [make_example(speech_like(duration, rng, sample_rate), noise_pool, rir_pool, rng)
                for _ in range(n_train + n_val)]
    return TrainData(examples[:n_train], examples[n_train:], sample_rate)


def manifest_dataset(path, sample_rate: int = DEFAULT_SAMPLE_RATE) -> TrainData:
    _, records = read_manifest(path)
    train = [example_from_record(r, sample_rate) for r in records if r["split"] == "train"]
    val = [example_from_record(r, sample_rate) for r in records if r["split"] == "val"]
    return TrainData(train, val, sample_rate)


def _crop(x: np.ndarray, offset: int, length: int) -> np.ndarray:
    seg = x[offset:offset + length]
    if len(seg) < length:
        seg = np.pad(seg, (0, length - len(seg)))
    return seg


def sample_batch(examples, batch_size: int, crop: int, rng: np.random.Generator):
    """Random examples and crop offsets; returns float32 ``(noisy, clean)`` tensors ``(B, crop)``."""
    idx = rng.choice(len(examples), size=batch_size, replace=len(examples) < batch_size)
    noisy, clean = [], []
    for i in idx:
        ex = examples[i]
        offset = int(rng.integers(0, max(1, len(ex.clean) - crop + 1)))
        noisy.append(_crop(ex.mixture, offset, crop))
        clean.append(_crop(ex.clean, offset, crop))
    return (torch.from_numpy(np.stack(noisy)).float(), torch.from_numpy(np.stack(clean)).float())


# --- state -----------------------------------------------------------------------

@dataclass
class TrainState:
    cfg: TrainConfig
    mdm: MDM
    score_net: ScoreNetwork
    optimizer: torch.optim.Optimizer
    data_rng: np.random.Generator
    noise_gen: torch.Generator
    ema: dict | None = None
    ema_updates: int = 0
    step: int = 0
    stage_step: int = 0
    stage: str = "init"
    best_val: float | None = None
    stale_evals: int = 0
    last_checkpoint: str | None = None
    history: list = field(default_factory=list)

    @property
    def trained(self) -> bool:
        return self.step > 0

    def parameters_snapshot(self) -> dict:
        out = {f"mdm/{k}": v.detach().clone() for k, v in self.mdm.state_dict().items()}
        out.update({f"score/{k}": v.detach().clone() for k, v in self.score_net.state_dict().items()})
        return out

    def inference_score_net(self) -> ScoreNetwork:
        if self.ema is None or not self.cfg.use_ema:
            return self.score_net
        net = copy.deepcopy(self.score_net)
        net.load_state_dict(self.ema)
        return net


def _optimizer(cfg: TrainConfig, mdm: MDM, score_net: ScoreNetwork) -> torch.optim.Optimizer:
    params = list(mdm.parameters()) + list(score_net.parameters())
    return torch.optim.Adam(params, lr=cfg.lr, betas=(cfg.beta1, cfg.beta2))


def init_state(cfg: TrainConfig) -> TrainState:
    torch.manual_seed(cfg.seed)
    mdm = MDM(cfg.mdm)
    score_net = ScoreNetwork(cfg.score, cfg.sde)
    ema = {k: v.detach().clone() for k, v in score_net.state_dict().items()} if cfg.use_ema else None
    return TrainState(
        cfg=cfg, mdm=mdm, score_net=score_net, optimizer=_optimizer(cfg, mdm, score_net),
        data_rng=np.random.default_rng(cfg.seed),
        noise_gen=torch.Generator().manual_seed(cfg.seed + 1),
        ema=ema,
    )


def save_state(path, state: TrainState) -> Path:
    arrays = state.parameters_snapshot()
    if state.ema is not None:
        arrays.update({f"ema/{k}": v for k, v in state.ema.items()})
    opt = state.optimizer.state_dict()
    for idx, slots in opt["state"].items():
        for name, value in slots.items():
            arrays[f"opt/{idx}/{name}"] = torch.as_tensor(value)
    arrays["rng/noise_gen"] = state.noise_gen.get_state()
    extras = {
        "config": config_to_dict(state.cfg),
        "param_groups": opt["param_groups"],
        "data_rng": state.data_rng.bit_generator.state,
        "step": state.step, "stage_step": state.stage_step, "stage": state.stage,
        "ema_updates": state.ema_updates, "best_val": state.best_val, "stale_evals": state.stale_evals,
    }
    return save_arrays(path, arrays, extras)


def load_state(path) -> TrainState:
    arrays, extras = load_arrays(path)
    cfg = config_from_dict(extras["config"])
    state = init_state(cfg)
    tensors = {k: torch.from_numpy(v.copy()) for k, v in arrays.items()}

    def section(prefix):
        return {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}

    state.mdm.load_state_dict(section("mdm/"))
    state.score_net.load_state_dict(section("score/"))
    if cfg.use_ema:
        state.ema = section("ema/")
    opt_state = {}
    for key, value in section("opt/").items():
        idx, name = key.split("/")
        opt_state.setdefault(int(idx), {})[name] = value
    state.optimizer.load_state_dict({"state": opt_state, "param_groups": extras["param_groups"]})
    state.noise_gen.set_state(tensors["rng/noise_gen"])
    state.data_rng.bit_generator.state = extras["data_rng"]
    for name in ("step", "stage_step", "stage", "ema_updates", "best_val", "stale_evals"):
        setattr(state, name, extras[name])
    state.last_checkpoint = str(path)
    return state


# --- losses ----------------------------------------------------------------------

def spectra(wave: torch.Tensor, cfg: TrainConfig) -> torch.Tensor:
    """Compressed complex STFT of a ``(B, L)`` waveform batch."""
    return compress_values(stft_tensor(wave), cfg.compress_exponent, cfg.compress_scale)


def stage1_loss(out: MdmOutput, s_c: torch.Tensor, clean_wave: torch.Tensor | None, cfg: TrainConfig,
                return_parts: bool = False):
    """``l1 * mean|S_p - S_c| + l2 * mean|S_p - S_c|**2 + time * mean|t_p - clean|``.

    Terms whose weight is zero are left out of the graph entirely.
    """
    if out.s_p.shape != s_c.shape:
        raise ShapeError(f"S_p {tuple(out.s_p.shape)} vs S_c {tuple(s_c.shape)}")
    diff = (out.s_p - s_c).abs()
    parts = {}
    if cfg.lambda_l1:
        parts["l1"] = diff.mean()
    if cfg.lambda_l2:
        parts["l2"] = (diff ** 2).mean()
    if cfg.lambda_time:
        if clean_wave is None or out.t_p.shape != clean_wave.shape:
            raise ShapeError("time-domain term needs a clean waveform shaped like t_p")
        parts["time"] = (out.t_p - clean_wave).abs().mean()
    weights = {"l1": cfg.lambda_l1, "l2": cfg.lambda_l2, "time": cfg.lambda_time}
    total = sum((weights[k] * v for k, v in parts.items()), torch.zeros((), dtype=diff.dtype))
    return (total, parts) if return_parts else total


def joint_loss(state: TrainState, noisy, clean, generator=None, score_fn=None, return_parts=False):
    """``lambda_dsm * dsm_loss + lambda_disc * stage1_loss`` on one batch.

    ``score_fn`` replaces the score network (used for oracle checks).
    """
    cfg = state.cfg
    s_n, s_c = spectra(noisy, cfg), spectra(clean, cfg)
    out = state.mdm(s_n, noisy)
    parts = {}
    total = torch.zeros((), dtype=torch.float32)
    if cfg.lambda_disc:
        disc, sub = stage1_loss(out, s_c, clean, cfg, return_parts=True)
        parts.update(sub)
        parts["disc"] = disc
        total = total + cfg.lambda_disc * disc
    if cfg.lambda_dsm:
        s_p, c_m = (out.s_p.detach(), out.c_m.detach()) if cfg.stop_gradient else (out.s_p, out.c_m)
        net = score_fn if score_fn is not None else state.score_net
        dsm = dsm_loss(net, s_c, s_p, c_m, generator=generator, cfg=cfg.sde)
        parts["dsm"] = dsm
        total = total + cfg.lambda_dsm * dsm
    return (total, parts) if return_parts else total


# --- loop ------------------------------------------------------------------------

def _ema_update(state: TrainState):
    if state.ema is None:
        return
    state.ema_updates += 1
    n = state.ema_updates
    decay = min(state.cfg.ema_decay, (1 + n) / (10 + n))
    with torch.no_grad():
        for k, v in state.score_net.state_dict().items():
            if v.dtype.is_floating_point:
                state.ema[k].mul_(decay).add_(v, alpha=1 - decay)
            else:
                state.ema[k].copy_(v)


def _step(state: TrainState, loss: torch.Tensor, parts: dict, log_fh=None):
    cfg = state.cfg
    if not torch.isfinite(loss):
        raise TrainingDiverged(state.step, state.last_checkpoint)
    state.optimizer.zero_grad(set_to_none=True)
    loss.backward()
    # each network is clipped on its own: the DSM gradients of the score network are orders of
    # magnitude larger than the discriminative ones and would otherwise starve the MDM
    norms = {}
    for name, net in (("mdm", state.mdm), ("score", state.score_net)):
        params = [p for p in net.parameters() if p.grad is not None]
        if params:
            norms[name] = torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip)
    grad_norm = torch.stack(list(norms.values())).norm() if norms else torch.zeros(())
    if not torch.isfinite(grad_norm):
        raise TrainingDiverged(state.step, state.last_checkpoint)
    state.optimizer.step()
    if state.stage == "joint":
        _ema_update(state)
    state.step += 1
    state.stage_step += 1
    record = {"step": state.step, "stage": state.stage, "loss": loss.item(), "lr": cfg.lr,
              "grad_norm": float(grad_norm), **{f"grad_norm_{k}": float(v) for k, v in norms.items()},
              **{k: v.item() for k, v in parts.items()}}
    state.history.append(record)
    if log_fh is not None:
        log_fh.write(json.dumps(record) + "\n")
        log_fh.flush()


def _checkpoint(state: TrainState, ckpt_dir):
    if ckpt_dir is None:
        return
    path = Path(ckpt_dir) / f"step{state.step:07d}.npz"
    save_state(path, state)
    state.last_checkpoint = str(path)
    save_state(Path(ckpt_dir) / "latest.npz", state)


def _crop_len(cfg: TrainConfig, data: TrainData) -> int:
    return int(round(cfg.crop_seconds * data.sample_rate))


def validation_si_sdr(state: TrainState, examples, max_items: int = 8) -> float | None:
    """Mean SI-SDR of the MDM estimate (k = 0) over up to ``max_items`` examples."""
    if not examples:
        return None
    scores = []
    for ex in examples[:max_items]:
        est = enhance(Waveform(ex.mixture, DEFAULT_SAMPLE_RATE), 0, 0, state)
        scores.append(si_sdr(ex.clean, est.samples))
    return float(np.mean(scores))


def validation_dsm(state: TrainState, examples, max_items: int = 8) -> float | None:
    """DSM loss on fixed validation crops with fixed noise (comparable across evaluations)."""
    if not examples:
        return None
    cfg = state.cfg
    crop = int(round(cfg.crop_seconds * DEFAULT_SAMPLE_RATE))
    noisy = torch.from_numpy(np.stack([_crop(e.mixture, 0, crop) for e in examples[:max_items]])).float()
    clean = torch.from_numpy(np.stack([_crop(e.clean, 0, crop) for e in examples[:max_items]])).float()
    gen = torch.Generator().manual_seed(cfg.seed + 12345)
    with torch.no_grad():
        s_n, s_c = spectra(noisy, cfg), spectra(clean, cfg)
        out = state.mdm(s_n, noisy)
        losses = [float(dsm_loss(state.score_net, s_c, out.s_p, out.c_m, gen, cfg.sde)) for _ in range(4)]
    return float(np.mean(losses))


def train_stage1(cfg: TrainConfig, data: TrainData, state: TrainState | None = None, log_path=None,
                 ckpt_dir=None, stop_at: int | None = None) -> TrainState:
    """Discriminative pretraining of the MDM for ``cfg.stage1_steps`` updates.

    ``state`` resumes a previous run; ``stop_at`` halts early at that global
    step (used to emulate an interrupted run).
    """
    state = state or init_state(cfg)
    if state.stage in ("joint", "done"):
        return state
    if cfg.stage1_steps == 0:
        return state
    state.stage = "disc"
    crop = _crop_len(cfg, data)
    log_fh = open(log_path, "a") if log_path else None
    try:
        while state.stage_step < cfg.stage1_steps:
            if stop_at is not None and state.step >= stop_at:
                return state
            noisy, clean = sample_batch(data.train, cfg.batch_size, crop, state.data_rng)
            s_n, s_c = spectra(noisy, cfg), spectra(clean, cfg)
            out = state.mdm(s_n, noisy)
            loss, parts = stage1_loss(out, s_c, clean, cfg, return_parts=True)
            _step(state, loss, parts, log_fh)
            if state.stage_step % cfg.eval_every == 0 and data.val:
                val = validation_si_sdr(state, data.val)
                rec = {"step": state.step, "stage": "disc", "val_si_sdr": val}
                state.history.append(rec)
                if log_fh:
                    log_fh.write(json.dumps(rec) + "\n")
            if state.stage_step % cfg.checkpoint_every == 0:
                _checkpoint(state, ckpt_dir)
    finally:
        if log_fh:
            log_fh.close()
    state.stage, state.stage_step = "joint", 0
    _checkpoint(state, ckpt_dir)
    return state


def train_joint(state: TrainState, cfg: TrainConfig, data: TrainData, log_path=None, ckpt_dir=None,
                stop_at: int | None = None) -> TrainState:
    """Joint multi-task training; stops after ``cfg.joint_steps`` or on validation plateau."""
    if state.stage == "done":
        return state
    if state.stage == "disc" or (state.stage == "init" and cfg.stage1_steps > 0):
        raise StateError("stage-1 training has not finished")
    state.stage = "joint"
    crop = _crop_len(cfg, data)
    log_fh = open(log_path, "a") if log_path else None
    try:
        while state.stage_step < cfg.joint_steps:
            if stop_at is not None and state.step >= stop_at:
                return state
            noisy, clean = sample_batch(data.train, cfg.batch_size, crop, state.data_rng)
            loss, parts = joint_loss(state, noisy, clean, state.noise_gen, return_parts=True)
            _step(state, loss, parts, log_fh)
            if state.stage_step % cfg.eval_every == 0 and data.val:
                val = validation_dsm(state, data.val)
                rec = {"step": state.step, "stage": "joint", "val_dsm": val}
                state.history.append(rec)
                if log_fh:
                    log_fh.write(json.dumps(rec) + "\n")
                if state.best_val is None or val < state.best_val * (1 - cfg.early_stop_tol):
                    state.best_val, state.stale_evals = val, 0
                else:
                    state.stale_evals += 1
                if state.stale_evals >= cfg.early_stop_evals:
                    log.info("validation dsm_loss plateaued at step %d", state.step)
                    break
            if state.stage_step % cfg.checkpoint_every == 0:
                _checkpoint(state, ckpt_dir)
    finally:
        if log_fh:
            log_fh.close()
    state.stage = "done"
    _checkpoint(state, ckpt_dir)
    return state


# --- inference -------------------------------------------------------------------

def enhance(noisy: Waveform, k_steps: int | None = None, seed: int = 0, state: TrainState | None = None,
            corrector: bool = False) -> Waveform:
    """Enhance one waveform: MDM estimate, then ``k_steps`` truncated reverse-diffusion steps.

    ``k_steps == 0`` returns the MDM estimate itself.
    """
    if state is None or not state.trained:
        raise StateError("enhance needs a trained state")
    cfg = state.cfg
    k_steps = cfg.k_steps if k_steps is None else k_steps
    if not 0 <= k_steps <= cfg.sde.total_steps:
        raise ConfigError(f"k_steps must be in [0, {cfg.sde.total_steps}]")
    x = np.asarray(noisy.samples, dtype=np.float32)
    length = len(x)
    if length < state.mdm.cfg.hop:
        raise ShapeError(f"input too short ({length} samples)")
    wave = torch.from_numpy(x)[None]
    with torch.no_grad():
        s_n = spectra(wave, cfg)
        out = state.mdm(s_n, wave)
        s_hat = out.s_p
        if k_steps > 0:
            gen = torch.Generator().manual_seed(seed)
            net = state.inference_score_net()
            prior = init_prior(out.s_p, k_steps, gen, cfg.sde)
            anchor = s_n if cfg.sampler_anchor == "s_n" else out.s_p
            s_hat = reverse_sample(prior, out.s_p, out.c_m, net, k_steps, gen, cfg.sde, corrector=corrector,
                                   anchor=anchor)
        spec = decompress_values(s_hat, cfg.compress_exponent, cfg.compress_scale)
        y = istft_tensor(spec, length)[0]
    return Waveform(y.numpy().astype(np.float64), noisy.sample_rate)


def mean_si_sdr(state: TrainState, examples, k_steps: int, seed: int = 0) -> float:
    vals = [si_sdr(ex.clean, enhance(Waveform(ex.mixture, DEFAULT_SAMPLE_RATE), k_steps, seed, state).samples)
            for ex in examples]
    return float(np.mean(vals))


def mixture_si_sdr(examples) -> float:
    return float(np.mean([si_sdr(ex.clean, ex.mixture) for ex in examples]))


def is_finite_history(history) -> bool:
    return all(math.isfinite(r["loss"]) for r in history if "loss" in r)
