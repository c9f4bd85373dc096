import pytest

from difftrack.config import (SCHEMA, Config, load_config, parse_config_text,
                              schema_help)
from difftrack.errors import ConfigError, DataError, ParseError


def test_defaults_come_from_schema():
    cfg = Config()
    assert cfg["image.search_size"] == 128
    assert cfg["head.hann_weight"] == 0.49
    assert cfg["diffusion.taps"] == (5, 6, 7)


def test_unknown_key_is_hard_error():
    cfg = Config()
    with pytest.raises(ConfigError):
        cfg.set("image.serch_size", 128)  # typo must not silently pass
    with pytest.raises(ConfigError):
        cfg["nope.nothing"]


def test_string_values_parse_by_declared_type():
    cfg = Config()
    cfg.set("train.lr", "5e-4")
    cfg.set("train.epochs", "7")
    cfg.set("diffusion.taps", "5, 6, 7")
    cfg.set("fusion.mode", "concat")
    assert cfg["train.lr"] == 5e-4
    assert cfg["train.epochs"] == 7
    assert cfg["diffusion.taps"] == (5, 6, 7)


def test_bad_value_reports_key():
    cfg = Config()
    with pytest.raises(ConfigError, match="train.epochs"):
        cfg.set("train.epochs", "many")


def test_overridden_tracks_only_explicit_values():
    cfg = Config({"train.lr": 1e-3})
    assert cfg.overridden() == {"train.lr": 1e-3}
    assert set(cfg.items()) == set(SCHEMA)


def test_copy_with_precedence():
    base = Config({"train.lr": 1e-3, "train.epochs": 5})
    derived = base.copy_with({"train.lr": 2e-3})
    assert derived["train.lr"] == 2e-3
    assert derived["train.epochs"] == 5
    assert base["train.lr"] == 1e-3  # original untouched


def test_parse_text_comments_blanks_and_inline_comments():
    cfg = parse_config_text(
        "# full line comment\n"
        "\n"
        "train.epochs = 3  # inline comment\n"
        "   image.search_size=256\n")
    assert cfg["train.epochs"] == 3
    assert cfg["image.search_size"] == 256


def test_parse_text_cites_path_and_line():
    with pytest.raises(ParseError) as exc:
        parse_config_text("train.epochs = 3\nbogus line\n", path="x.cfg")
    assert exc.value.path == "x.cfg"
    assert exc.value.line == 2
    assert "x.cfg:2" in str(exc.value)


def test_parse_text_unknown_key_becomes_parse_error_with_location():
    with pytest.raises(ParseError) as exc:
        parse_config_text("train.speed = 9\n", path="y.cfg")
    assert exc.value.line == 1


def test_load_config_round_trip(tmp_path):
    p = tmp_path / "run.cfg"
    p.write_text("train.lr = 2e-4\ndata.canvas = 128\n")
    cfg = load_config(p)
    assert cfg["train.lr"] == 2e-4
    assert cfg["data.canvas"] == 128


def test_load_config_missing_file():
    with pytest.raises(DataError):
        load_config("/nonexistent/path.cfg")


def test_schema_help_lists_every_key_with_docs():
    text = schema_help()
    for key in SCHEMA.values():
        assert key.name in text
        assert key.doc in text


def test_shipped_config_files_parse(tmp_path):
    import pathlib
    root = pathlib.Path(__file__).resolve().parents[1] / "configs"
    for cfg_file in sorted(root.glob("*.cfg")):
        load_config(cfg_file)  # must not raise
