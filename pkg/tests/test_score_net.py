import pytest
import torch
from hypothesis import given, settings, strategies as st

from mddm.diffusion.score_net import CrossAttention, ScoreNetConfig, ScoreNetwork, timestep_embedding
from mddm.diffusion.sde import complex_normal, std
from mddm.errors import ConfigError, ShapeError

SMALL = ScoreNetConfig(base_channels=8, levels=4, time_embed_dim=16, cond_dim=16, attn_heads=4)


def test_default_config():
    cfg = ScoreNetConfig()
    assert (cfg.base_channels, cfg.levels, cfg.time_embed_dim, cfg.cond_dim) == (32, 4, 128, 256)
    assert cfg.channels == [32, 64, 128, 256]
    with pytest.raises(ConfigError):
        ScoreNetConfig(time_embed_dim=7)


def test_timestep_embedding_shape_and_range():
    e = timestep_embedding(torch.tensor([0.0, 0.5, 1.0]), 16)
    assert e.shape == (3, 16)
    assert torch.all(e.abs() <= 1)
    assert torch.equal(e[0, :8], torch.zeros(8)) and torch.equal(e[0, 8:], torch.ones(8))


@settings(max_examples=6)
@given(bins=st.integers(9, 40), frames=st.integers(3, 30), cond_len=st.integers(1, 9))
def test_output_matches_input_shape(bins, frames, cond_len):
    net = ScoreNetwork(SMALL)
    x = complex_normal((2, bins, frames))
    out = net(x, complex_normal((2, bins, frames)), torch.randn(2, cond_len, 16), torch.tensor([0.2, 0.7]))
    assert out.shape == x.shape and out.is_complex()


def test_default_width_on_257_bins():
    net = ScoreNetwork(ScoreNetConfig(base_channels=8, cond_dim=256))
    x = complex_normal((1, 257, 20))
    out = net(x, x, torch.randn(1, 10, 256), torch.tensor([0.5]))
    assert out.shape == (1, 257, 20)
    assert net.last_attention.shape == (1, 8, 33 * 3, 10)


def test_scale_by_sigma():
    torch.manual_seed(0)
    net = ScoreNetwork(SMALL)
    raw = ScoreNetwork(ScoreNetConfig(**{**SMALL.to_dict(), "scale_by_sigma": False}))
    raw.load_state_dict(net.state_dict())
    x, c = complex_normal((1, 16, 8)), torch.randn(1, 3, 16)
    t = torch.tensor([0.4])
    assert torch.allclose(net(x, x, c, t) * std(t), raw(x, x, c, t), atol=1e-6)


def test_cross_attention_uses_condition():
    net = ScoreNetwork(SMALL)
    x = complex_normal((1, 16, 8))
    t = torch.tensor([0.5])
    a = net(x, x, torch.randn(1, 4, 16), t)
    b = net(x, x, torch.randn(1, 4, 16), t)
    assert not torch.allclose(a, b)


def test_cross_attention_weights_normalised():
    ca = CrossAttention(16, 8, 4)
    out, w = ca(torch.randn(2, 16, 3, 5), torch.randn(2, 7, 8))
    assert out.shape == (2, 16, 3, 5) and w.shape == (2, 4, 15, 7)
    assert torch.allclose(w.sum(-1), torch.ones(2, 4, 15), atol=1e-6)


def test_shape_errors():
    net = ScoreNetwork(SMALL)
    x = complex_normal((1, 16, 8))
    with pytest.raises(ShapeError):
        net(x, complex_normal((1, 16, 9)), torch.randn(1, 3, 16), torch.tensor([0.5]))
    with pytest.raises(ShapeError):
        net(x, x, torch.randn(1, 3, 12), torch.tensor([0.5]))


def test_deterministic():
    net = ScoreNetwork(SMALL)
    x, c, t = complex_normal((1, 16, 8)), torch.randn(1, 3, 16), torch.tensor([0.3])
    assert torch.equal(net(x, x, c, t), net(x, x, c, t))
