import pytest

from v2ifuse.errors import ConfigurationError
from v2ifuse.harness.config import ExperimentConfig, from_dict, load_config


def test_defaults_listed_when_omitted():
    cfg = from_dict({"seed": 3, "modes": {"rfea": False}})
    assert cfg.seed == 3 and cfg.modes.rfea is False
    assert "modes.camera" in cfg.defaults_applied
    assert "modes.rfea" not in cfg.defaults_applied and "seed" not in cfg.defaults_applied


def test_load_yaml(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("sensors: {degrade_factor: 2}\nscene: {n_objects: [2, 3]}\n")
    cfg = load_config(p)
    assert cfg.sensors.degrade_factor == 2 and cfg.scene.n_objects == (2, 3)


@pytest.mark.parametrize("raw", [
    {"bogus": {}},
    {"modes": {"nope": True}},
    {"modes": {"confidence": "xor"}},
    {"modes": {"camera": "yes"}},
    {"modes": {"camera": False}},  # vwf still on
    {"sensors": {"degrade_factor": 3}},
    {"training": {"degrade_factors": [1, 5]}},
    {"protocol": {"rfea_threshold": 0.0}},
    {"training": {"optimizer": "lbfgs"}},
    {"suite": {"n_open": 1.5}},
])
def test_invalid_configs_rejected(raw):
    with pytest.raises(ConfigurationError):
        from_dict(raw)


def test_bad_yaml(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("modes: [1, 2\n")
    with pytest.raises(ConfigurationError):
        load_config(p)
    p.write_text("- 1\n")
    with pytest.raises(ConfigurationError):
        load_config(p)


def test_with_applies_several_keys_before_validating():
    cfg = ExperimentConfig().with_(**{"modes.camera": False, "modes.vwf": False, "modes.focm": False})
    assert not cfg.modes.camera
    with pytest.raises(ConfigurationError):
        ExperimentConfig().with_(**{"modes.unknown": 1})


def test_echo_is_sorted_and_complete():
    lines = ExperimentConfig().echo_lines()
    assert lines == sorted(lines)
    assert "modes.selection: xnor" in lines and "seed: 0" in lines
    assert "training.degrade_factors: [1, 2, 4]" in lines
