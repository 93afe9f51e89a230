import pytest

from mddm.config import (TrainConfig, apply_overrides, config_from_dict, config_to_dict, desk_profile, dump_config,
                         load_config, parse_config_text, profile)
from mddm.errors import ConfigError


@pytest.mark.parametrize("name", ["desk", "paper"])
def test_text_round_trip(name, tmp_path):
    cfg = profile(name)
    path = tmp_path / "c.txt"
    path.write_text(dump_config(cfg))
    assert load_config(path, profile_name="paper") == cfg
    assert config_from_dict(config_to_dict(cfg)) == cfg


def test_overrides_coerce_types():
    cfg = apply_overrides(desk_profile(), {"train.lr": "2e-3", "train.stage1_steps": 5, "mdm.npm_channels": "(4, 8)",
                                           "train.stop_gradient": "True"})
    assert cfg.lr == 2e-3 and cfg.stage1_steps == 5 and cfg.mdm.npm_channels == (4, 8) and cfg.stop_gradient
    assert isinstance(apply_overrides(cfg, {"train.lr": 1}).lr, float)


@pytest.mark.parametrize("bad", [{"train.nope": 1}, {"zzz.lr": 1}, {"lr": 1}, {"train.batch_size": "big"},
                                 {"train.stop_gradient": 1}, {"train.k_steps": 51}, {"score.cond_dim": 12}])
def test_bad_overrides(bad):
    with pytest.raises(ConfigError):
        apply_overrides(desk_profile(), bad)


def test_text_format_errors():
    with pytest.raises(ConfigError, match="version"):
        parse_config_text("train.lr = 1\n")
    with pytest.raises(ConfigError, match="version"):
        parse_config_text("version = 2\n")
    with pytest.raises(ConfigError, match="duplicate"):
        parse_config_text("version = 1\ntrain.lr = 1\ntrain.lr = 2\n")
    with pytest.raises(ConfigError):
        parse_config_text("version = 1\njunk\n")
    assert parse_config_text("version = 1  # comment\n\ntrain.lr = 0.5\n") == {"train.lr": 0.5}


def test_validation():
    with pytest.raises(ConfigError):
        TrainConfig(lambda_dsm=-1)
    with pytest.raises(ConfigError):
        TrainConfig(lr_schedule="cosine")
    with pytest.raises(ConfigError):
        profile("laptop")
