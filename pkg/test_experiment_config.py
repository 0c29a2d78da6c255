import json

import pytest

from src.errors import ConfigError
from src.experiment_config import PRESET_DIR, ExperimentConfig


def test_defaults():
    config = ExperimentConfig()
    assert config.attack.m == 30 and config.attack.synth_lr == 0.01
    assert config.attack.kd_lr == 0.001
    assert config.oracle.price_per_1k == 0.25


@pytest.mark.parametrize("name", sorted(p.stem for p in PRESET_DIR.glob("*.json")))
def test_every_preset_loads(name):
    config = ExperimentConfig.preset(name)
    assert config.attack.N >= 1


def test_desk_preset_values():
    config = ExperimentConfig.preset("desk-blobs")
    assert (config.dataset.classes, config.dataset.dim) == (10, 64)
    assert (config.attack.N, config.attack.M, config.attack.S, config.attack.m) == (50, 10, 256, 30)


def test_unknown_preset():
    with pytest.raises(ConfigError, match="available"):
        ExperimentConfig.preset("imagenet")


def test_unknown_section_and_key():
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"training": {}})
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"attack": {"epochs": 3}})


def test_overrides_parse_json_values():
    config = ExperimentConfig().override(["attack.N=3", "oracle.topk=null", "attack.mode=dnn_syn",
                                          "oracle.sweep_round=[0,1,2]", "attack.augment=false"])
    assert config.attack.N == 3 and config.oracle.topk is None
    assert config.attack.mode == "dnn_syn"
    assert config.oracle.sweep_round == [0, 1, 2]
    assert config.attack.augment is False


@pytest.mark.parametrize("assignment", ["attack.N", "N=3", "model.N=3", "attack.epochs=3"])
def test_bad_overrides(assignment):
    with pytest.raises(ConfigError):
        ExperimentConfig().override([assignment])


def test_set_ignores_none():
    config = ExperimentConfig()
    config.set("oracle", "budget", None)
    config.set("attack", "seed", 4)
    assert config.oracle.budget is None and config.attack.seed == 4


def test_load_errors(tmp_path):
    with pytest.raises(ConfigError):
        ExperimentConfig.load(tmp_path / "absent.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ConfigError):
        ExperimentConfig.load(bad)


def test_resolved_config_round_trips(tmp_path):
    config = ExperimentConfig().override([f"output.dir={tmp_path / 'run'}", "attack.S=12"])
    path = config.write_resolved()
    reloaded = ExperimentConfig.from_dict(json.loads(path.read_text()))
    assert reloaded.to_dict() == config.to_dict()
