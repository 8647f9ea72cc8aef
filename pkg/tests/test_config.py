import pytest

from cityseg.config import dump_config, load_config, parse_config
from cityseg.errors import ConfigError


def test_defaults():
    cfg = parse_config("", env={})
    assert cfg.train.tau == 0.07 and cfg.train.alpha == 0.3 and cfg.train.margin == 1.0
    assert cfg.train.lr == 0.005 and cfg.train.momentum == 0.9
    assert cfg.sampler.local_grid == 0.2 and cfg.sampler.global_grid == 1.0
    assert cfg.sampler.local_count == 4096 and cfg.sampler.global_multiplier == 10
    assert cfg.encoder.window == 64 and cfg.encoder.attn_scaling == "none"
    assert cfg.embedding.mode == "hashed"


def test_overrides_and_seed():
    text = """
[run]
seed = 7
[sampler]
curve = hilbert
local_count = 256
[encoder]
hidden_dim = 16
attn_scaling = inv_sqrt_d
use_global = false
[train]
alpha = 0.5
optimizer = adamw
"""
    cfg = parse_config(text, env={})
    assert cfg.seed == 7 and cfg.sampler.seed == 7 and cfg.train.seed == 7
    assert cfg.sampler.curve == "hilbert" and cfg.sampler.local_count == 256
    assert cfg.encoder.hidden_dim == 16 and cfg.encoder.use_global is False
    assert cfg.train.alpha == 0.5 and cfg.train.optimizer == "adamw"


def test_env_seed_overrides():
    cfg = parse_config("[run]\nseed = 7\n", env={"CITYSEG_SEED": "42"})
    assert cfg.seed == 42 and cfg.train.seed == 42
    with pytest.raises(ConfigError):
        parse_config("", env={"CITYSEG_SEED": "x"})


@pytest.mark.parametrize("text", [
    "[bogus]\na = 1\n",
    "[train]\nnope = 1\n",
    "[run]\nwhat = 1\n",
    "[train]\ntau = hot\n",
    "[train]\ntau = 0\n",
    "[encoder]\nhidden_dim = 10\nn_heads = 4\n",
    "[encoder]\nuse_global = maybe\n",
    "not an ini file",
])
def test_bad_configs(text):
    with pytest.raises(ConfigError):
        parse_config(text, env={})


def test_dump_round_trip(tmp_path):
    cfg = parse_config("[train]\nalpha = 0.1\n[sampler]\ncurve = hilbert\n", env={})
    (tmp_path / "c.ini").write_text(dump_config(cfg))
    assert load_config(tmp_path / "c.ini", env={}) == cfg


def test_missing_file():
    with pytest.raises(ConfigError):
        load_config("/nonexistent/cfg.ini", env={})
