import pytest
from hypothesis import given, settings, strategies as st

from resmatch.config import load_config, parse_config, save_config, serialize_config
from resmatch.distiller import DistillConfig
from resmatch.errors import ConfigError


def test_defaults_round_trip():
    cfg = DistillConfig()
    assert parse_config(serialize_config(cfg)) == cfg


def test_comments_and_blank_lines():
    cfg = parse_config("# run\nB = 40\n\nk = 1   # one merge\nalpha=0.25\narc = false\n")
    assert (cfg.B, cfg.k, cfg.alpha, cfg.arc) == (40, 1, 0.25, False)


@pytest.mark.parametrize("text", ["B = ten\n", "bogus = 1\n", "B 10\n", "B = 10\nB = 11\n",
                                  "arc = maybe\n", "alpha = 2\n"])
def test_bad_configs(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "none.txt")


def test_file_round_trip(tmp_path):
    cfg = DistillConfig(B=77, k=2, d_ds=24, d_orig=32, precision="half16", dataset="/data/shapes")
    assert load_config(save_config(cfg, tmp_path / "c.txt")) == cfg


@settings(max_examples=50, deadline=None)
@given(B=st.integers(4, 5000), k=st.integers(0, 3), alpha=st.floats(0, 1), lam=st.floats(0, 10),
       lr=st.floats(1e-4, 1.0), arc=st.booleans(), precision=st.sampled_from(["full32", "half16"]),
       scheduler=st.sampled_from(["cosine-budget", "cosine-stage", "constant"]),
       d_ds=st.integers(8, 32))
def test_parse_serialize_fixed_point(B, k, alpha, lam, lr, arc, precision, scheduler, d_ds):
    cfg = DistillConfig(B=B, k=k, alpha=alpha, lam=lam, lr=lr, arc=arc, precision=precision,
                        scheduler=scheduler, d_ds=d_ds, d_orig=32)
    text = serialize_config(cfg)
    again = parse_config(text)
    assert again == cfg
    assert serialize_config(again) == text
