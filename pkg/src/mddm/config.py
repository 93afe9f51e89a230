"""Run configuration: dataclasses, named profiles and a flat ``section.key = value`` text format.

Example file::

    version = 1
    train.stage1_steps = 2000
    mdm.start_channels = 16
    sde.stiffness = 1.5

Values are Python literals (numbers, booleans, tuples, quoted strings); bare
words are taken as strings. Unknown sections or keys are rejected.
"""
from __future__ import annotations

import ast
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .diffusion.score_net import ScoreNetConfig
from .diffusion.sde import SdeConfig
from .errors import ConfigError
from .nn.mdm import MdmConfig

CONFIG_VERSION = 1
PROFILES = ("desk", "paper")


@dataclass
class TrainConfig:
    stage1_steps: int = 200_000
    joint_steps: int = 200_000
    batch_size: int = 4
    crop_seconds: float = 2.0
    lr: float = 1e-4
    lr_schedule: str = "constant"
    beta1: float = 0.9
    beta2: float = 0.999
    grad_clip: float = 5.0
    lambda_l1: float = 1.0
    lambda_l2: float = 1.0
    lambda_time: float = 1.0
    lambda_dsm: float = 1.0
    lambda_disc: float = 1.0
    stop_gradient: bool = False
    use_ema: bool = True
    ema_decay: float = 0.999
    seed: int = 0
    checkpoint_every: int = 5000
    eval_every: int = 1000
    early_stop_evals: int = 3
    early_stop_tol: float = 0.01
    compress_exponent: float = 0.5
    compress_scale: float = 0.15
    k_steps: int = 30
    sampler_anchor: str = "s_p"  # drift anchor of the reverse sampler: "s_p" or "s_n"
    mdm: MdmConfig = field(default_factory=MdmConfig)
    score: ScoreNetConfig = field(default_factory=ScoreNetConfig)
    sde: SdeConfig = field(default_factory=SdeConfig)

    def __post_init__(self):
        self.validate()

    def validate(self):
        for name in ("lambda_l1", "lambda_l2", "lambda_time", "lambda_dsm", "lambda_disc"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.stage1_steps < 0 or self.joint_steps < 0:
            raise ConfigError("step counts must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.crop_seconds <= 0:
            raise ConfigError("crop_seconds must be positive")
        if self.lr <= 0 or self.grad_clip <= 0:
            raise ConfigError("lr and grad_clip must be positive")
        if self.lr_schedule != "constant":
            raise ConfigError(f"unsupported lr_schedule {self.lr_schedule!r}")
        if not 0 <= self.ema_decay < 1:
            raise ConfigError("ema_decay must be in [0, 1)")
        if self.checkpoint_every < 1 or self.eval_every < 1:
            raise ConfigError("checkpoint_every and eval_every must be >= 1")
        if self.score.cond_dim != self.mdm.bottleneck_channels:
            raise ConfigError(f"score.cond_dim {self.score.cond_dim} must equal the MDM bottleneck width "
                              f"{self.mdm.bottleneck_channels}")
        if self.sampler_anchor not in ("s_p", "s_n"):
            raise ConfigError(f"sampler_anchor must be 's_p' or 's_n', got {self.sampler_anchor!r}")
        if not 0 <= self.k_steps <= self.sde.total_steps:
            raise ConfigError("k_steps outside [0, sde.total_steps]")


def desk_profile() -> TrainConfig:
    """Miniature widths and short schedules sized for a single CPU core."""
    mdm = MdmConfig(start_channels=16, tfgru_hidden=64, npm_channels=(8, 16, 16, 32), npm_gru_hidden=32,
                    template_dim=64, mlp_hidden=64)
    score = ScoreNetConfig(base_channels=16, time_embed_dim=64, cond_dim=mdm.bottleneck_channels)
    return TrainConfig(stage1_steps=2000, joint_steps=2000, batch_size=4, crop_seconds=0.5, lr=1e-3,
                       checkpoint_every=500, eval_every=250, stop_gradient=True, mdm=mdm, score=score)


def paper_profile() -> TrainConfig:
    return TrainConfig()


def profile(name: str) -> TrainConfig:
    if name == "desk":
        return desk_profile()
    if name == "paper":
        return paper_profile()
    raise ConfigError(f"unknown profile {name!r}; choose from {PROFILES}")


_SECTIONS = {"mdm": "mdm", "score": "score", "sde": "sde"}


def _parse_value(text: str):
    text = text.strip()
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        return text


def _coerce(current, value, key):
    if isinstance(current, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected true/false, got {value!r}")
        return value
    if isinstance(current, int) and isinstance(value, int) and not isinstance(value, bool):
        return value
    if isinstance(current, float) and isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    if isinstance(current, tuple) and isinstance(value, (tuple, list)):
        return tuple(value)
    if isinstance(current, str) and isinstance(value, str):
        return value
    raise ConfigError(f"{key}: cannot use {value!r} where {type(current).__name__} is expected")


def apply_overrides(cfg: TrainConfig, overrides: dict) -> TrainConfig:
    """Return a new config with ``{"section.key": value}`` overrides applied and validated."""
    flat = {f.name: getattr(cfg, f.name) for f in dataclasses.fields(cfg) if f.name not in _SECTIONS}
    sub = {name: dataclasses.asdict(getattr(cfg, name)) for name in _SECTIONS}
    for key, value in overrides.items():
        if isinstance(value, str):
            value = _parse_value(value)
        section, _, name = key.partition(".")
        if not name:
            raise ConfigError(f"config key {key!r} must look like section.key")
        if section == "train":
            if name not in flat:
                raise ConfigError(f"unknown config key {key!r}")
            flat[name] = _coerce(flat[name], value, key)
        elif section in sub:
            if name not in sub[section]:
                raise ConfigError(f"unknown config key {key!r}")
            sub[section][name] = _coerce(sub[section][name], value, key)
        else:
            raise ConfigError(f"unknown config section {section!r}")
    try:
        return TrainConfig(**flat, mdm=MdmConfig(**sub["mdm"]), score=ScoreNetConfig(**sub["score"]),
                           sde=SdeConfig(**sub["sde"]))
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def parse_config_text(text: str) -> dict:
    """Parse the text format into ``{"section.key": value}``; checks the version line."""
    out, version = {}, None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"line {lineno}: expected key = value")
        key = key.strip()
        if key == "version":
            version = _parse_value(value)
            continue
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = _parse_value(value)
    if version is None:
        raise ConfigError("config is missing a version line")
    if version != CONFIG_VERSION:
        raise ConfigError(f"config version {version} unsupported (expected {CONFIG_VERSION})")
    return out


def dump_config(cfg: TrainConfig) -> str:
    lines = [f"version = {CONFIG_VERSION}"]
    for f in dataclasses.fields(cfg):
        if f.name not in _SECTIONS:
            lines.append(f"train.{f.name} = {getattr(cfg, f.name)!r}")
    for section in _SECTIONS:
        for k, v in dataclasses.asdict(getattr(cfg, section)).items():
            lines.append(f"{section}.{k} = {v!r}")
    return "\n".join(lines) + "\n"


def config_to_dict(cfg: TrainConfig) -> dict:
    return dataclasses.asdict(cfg)


def config_from_dict(d: dict) -> TrainConfig:
    d = dict(d)
    return TrainConfig(**{k: v for k, v in d.items() if k not in _SECTIONS},
                       mdm=MdmConfig(**d["mdm"]), score=ScoreNetConfig(**d["score"]), sde=SdeConfig(**d["sde"]))


def load_config(path=None, overrides: dict | None = None, profile_name: str = "paper") -> TrainConfig:
    """Profile defaults, then the config file (if any), then explicit overrides."""
    cfg = profile(profile_name)
    if path is not None:
        cfg = apply_overrides(cfg, parse_config_text(Path(path).read_text()))
    if overrides:
        cfg = apply_overrides(cfg, overrides)
    return cfg
