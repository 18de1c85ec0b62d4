import pytest

from aggseg.config import ExperimentConfig, format_value, parse_overrides, parse_text, parse_value
from aggseg.exceptions import ConfigurationError


@pytest.mark.parametrize("text, value", [("3", 3), ("1e-3", 1e-3), ("true", True), ("full", "full"),
                                         ("4,8,16", (4, 8, 16)), ("-0.3,0.3", (-0.3, 0.3))])
def test_parse_value(text, value):
    assert parse_value(text) == value


def test_format_round_trip():
    for value in (3, 0.25, True, "group", (4, 8, 16), (0.6, 0.9), ("a",)):
        assert parse_value(format_value(value)) == value


def test_file_and_overrides(tmp_path):
    path = tmp_path / "exp.cfg"
    path.write_text("# desk run\nseed = 5\ntrain.variant = cons\ntrain.epochs = 12\narch.block_depths = 4,8,8,16,16\n")
    cfg = ExperimentConfig.load(path, parse_overrides(["train.epochs=3", "perturb.noise_range=-0.1,0.1"]))
    assert cfg.seed == 5
    assert cfg.train.variant == "cons" and cfg.train.epochs == 3 and cfg.train.seed == 5
    assert cfg.train.perturb.noise_range == (-0.1, 0.1)
    assert cfg.arch.block_depths == (4, 8, 8, 16, 16)
    assert cfg.synth.seed == 5


def test_resolved_text_reloads_identically(tmp_path):
    cfg = ExperimentConfig.load(overrides={"seed": 2, "weights.w2": 0.5, "data.k": 3})
    path = tmp_path / "resolved"
    path.write_text(cfg.to_text())
    again = ExperimentConfig.load(path)
    assert again.to_mapping() == cfg.to_mapping()


@pytest.mark.parametrize("mapping", [{"nosection": 1}, {"train.bogus": 1}, {"foo.bar": 1},
                                     {"train.seed": 3}, {"train.variant": "semi"}, {"data.nope": 1}])
def test_rejects_bad_keys(mapping):
    with pytest.raises(ConfigurationError):
        ExperimentConfig.from_mapping(mapping)


def test_malformed_lines():
    with pytest.raises(ConfigurationError):
        parse_text("train.epochs 3")
    with pytest.raises(ConfigurationError):
        parse_overrides(["epochs"])
