import pytest

from multigrain.config import dump_kv, from_mapping, parse_kv, to_mapping
from multigrain.errors import ConfigError, ParseError
from multigrain.model import ModelConfig
from multigrain.train import TrainConfig


def test_parse_kv_with_comments():
    text = "# header\nsteps = 10   # inline\n\nlr=0.5\n"
    assert parse_kv(text) == {"steps": "10", "lr": "0.5"}


def test_parse_error_names_line():
    with pytest.raises(ParseError) as err:
        parse_kv("steps = 1\noops\n", "run.cfg")
    assert "run.cfg:2" in str(err.value)


def test_from_mapping_coerces_and_round_trips():
    t = from_mapping(TrainConfig, {"steps": "40", "warmup": "4", "seq_len": "", "freeze_encoder": "yes"})
    assert t.steps == 40 and t.seq_len is None and t.freeze_encoder is True
    assert from_mapping(TrainConfig, parse_kv(dump_kv(to_mapping(t)))) == t
    m = ModelConfig(10, 12, fusion="cat:32:32")
    assert from_mapping(ModelConfig, to_mapping(m)) == m


def test_unknown_and_bad_values():
    with pytest.raises(ConfigError, match="stepz"):
        from_mapping(TrainConfig, {"stepz": "1"})
    with pytest.raises(ConfigError, match="steps"):
        from_mapping(TrainConfig, {"steps": "ten"})


def test_train_config_invariants():
    with pytest.raises(ConfigError):
        TrainConfig(steps=10, warmup=11)
    with pytest.raises(ConfigError):
        TrainConfig(optimizer="sgd")
    with pytest.raises(ConfigError):
        TrainConfig(stage2_step=5)
