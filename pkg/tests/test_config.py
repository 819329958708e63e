import pytest

from rqmotion.config import RunConfig, SamplerConfig, TransformerConfig, load_config, parse_config
from rqmotion.errors import ConfigError


def test_default_round_trip():
    cfg = RunConfig.from_preset("desk")
    again = parse_config(cfg.to_text())
    assert again == cfg and again.hash() == cfg.hash()


def test_paper_preset_values():
    cfg = RunConfig.from_preset("paper")
    assert cfg.vq.codebook_size == 8192 and cfg.vq.d_latent == 128 and cfg.vq.levels == 6
    assert cfg.rqhc.heads == (16, 12, 6, 2, 2, 2)
    assert cfg.rqhc.layers == (18, 16, 8, 4, 2, 2)
    assert cfg.train_rqhc.lr_start == 2.5e-5 and cfg.train_rqhc.lr_end == 3e-6
    assert parse_config(cfg.to_text()) == cfg


def test_desk_shape_mirrors_paper():
    desk = TransformerConfig.preset("desk")
    assert desk.d_model == 128 and desk.heads == (4, 4, 2, 2, 2, 2) and desk.layers == (3, 3, 2, 1, 1, 1)


def test_overrides_and_inheritance():
    cfg = parse_config("[vq]\ncodebook_size = 32\nlevels = 3\n[train.vq]\nlam = 0\n[rqhc]\nheads = 2, 2, 1\nlayers = 1, 1, 1\n")
    assert cfg.rqhc.codebook_size == 32 and cfg.rqhc.levels == 3
    assert cfg.train_vq.lam == 0.0


def test_level_mismatch_rejected():
    with pytest.raises(ConfigError):
        parse_config("[vq]\nlevels = 3\n")  # transformer still lists six levels


def test_unknown_key():
    with pytest.raises(ConfigError):
        parse_config("[vq]\ncolour = blue\n")


def test_bad_value():
    with pytest.raises(ConfigError):
        parse_config("[vq]\nlevels = many\n")


def test_lr_order():
    with pytest.raises(ConfigError):
        parse_config("[train.vq]\nlr_start = 1e-5\nlr_end = 1e-3\n")


def test_sampler_bounds():
    with pytest.raises(ConfigError):
        SamplerConfig(temperature=11).validate(65)
    with pytest.raises(ConfigError):
        SamplerConfig(top_k=66).validate(65)
    SamplerConfig(temperature=0.0, top_k=65).validate(65)


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "nope.ini")


def test_unknown_preset():
    with pytest.raises(ConfigError):
        parse_config("[run]\npreset = huge\n")
