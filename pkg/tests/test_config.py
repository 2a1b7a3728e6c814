import pytest
from hypothesis import given, strategies as st

from gsq.codec import CodecConfig
from gsq.config import dump_config, load_config, parse_config, save_config
from gsq.render import RenderConfig
from gsq.trainer import TrainConfig, desk_config, rescale_schedule, schedule_at


@pytest.mark.parametrize("cfg", [CodecConfig(), TrainConfig(), RenderConfig(), desk_config()])
def test_dump_parse_roundtrip(cfg):
    assert parse_config(dump_config(cfg), type(cfg)) == cfg


def test_parse_comments_overrides_and_tuples():
    text = "# comment\nepochs = 30   # trailing\n\nbetas = [0.8, 0.9]\n"
    cfg = parse_config(text, TrainConfig, seed=7, warmup=3, freeze_start=28)
    assert cfg.epochs == 30 and cfg.betas == (0.8, 0.9) and cfg.seed == 7


def test_parse_errors():
    with pytest.raises(ValueError, match="unknown key"):
        parse_config("nope = 1", CodecConfig)
    with pytest.raises(ValueError, match="key = value"):
        parse_config("G 16", CodecConfig)


def test_file_roundtrip(tmp_path):
    cfg = CodecConfig(G=32, rvq_size=64)
    save_config(tmp_path / "m.cfg", cfg)
    assert load_config(tmp_path / "m.cfg", CodecConfig) == cfg
    assert load_config(tmp_path / "m.cfg", CodecConfig, d_b=8).d_b == 8


@given(st.integers(3, 400))
def test_rescaled_schedule_valid_and_shaped(epochs):
    cfg = rescale_schedule(TrainConfig(), epochs)
    assert cfg.epochs == epochs
    assert not schedule_at(1, cfg).vq_enabled
    assert schedule_at(epochs, cfg).codebooks_frozen
