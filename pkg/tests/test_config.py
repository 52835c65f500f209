import pytest

from mvcl.config import CliConfig, apply_overrides, dump_config, load_config, parse_config_text
from mvcl.errors import ConfigError


def test_defaults_are_valid():
    cfg = CliConfig()
    assert cfg.train_config().epochs == 50
    assert cfg.synthetic_spec().dim_feature == 32


def test_round_trip_defaults_and_overrides(tmp_path):
    cfg = apply_overrides(
        CliConfig(),
        [("seed", "99"), ("train.learning_rate", "0.003"), ("train.hidden", "8,4"), ("loss.neg_sign", "paper_literal")],
    )
    text = dump_config(cfg)
    assert parse_config_text(text) == cfg
    path = tmp_path / "c.cfg"
    path.write_text(text, encoding="utf-8")
    assert load_config(path) == cfg
    assert dump_config(load_config(path)) == text


def test_float_round_trip_is_exact():
    cfg = apply_overrides(CliConfig(), [("loss.tau", repr(0.1 + 0.2))])
    assert parse_config_text(dump_config(cfg)).loss.tau == 0.1 + 0.2


def test_comments_and_blank_lines():
    cfg = parse_config_text("# header\n\ntrain.epochs = 7  # inline\n")
    assert cfg.train.epochs == 7


@pytest.mark.parametrize(
    "text,needle",
    [
        ("train.nope = 1", "train.nope"),
        ("bogus.epochs = 1", "bogus.epochs"),
        ("epochs = 1", "epochs"),
        ("train.epochs = many", "train.epochs"),
        ("just words", "line 1"),
    ],
)
def test_errors_name_the_key(text, needle):
    with pytest.raises(ConfigError, match=needle):
        parse_config_text(text)


def test_invalid_values_rejected():
    with pytest.raises(ConfigError, match="tau"):
        parse_config_text("loss.tau = 0")
    with pytest.raises(ConfigError):
        parse_config_text("train.epochs = -1").train_config()


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "absent.cfg")
