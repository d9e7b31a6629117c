import pytest

from grass.config import (
    RunConfig,
    TrainConfig,
    apply_overrides,
    dump_config,
    from_dict,
    load_config,
    to_dict,
    toy_config,
)
from grass.errors import ConfigError


def test_defaults():
    cfg = RunConfig()
    assert cfg.train.total_epochs == 350 and cfg.train.warmup_epochs == 150
    assert cfg.train.threshold == 0.5 and cfg.train.augment.K == 2
    assert cfg.finetune.fraction == 0.01
    assert toy_config().train.batch_size == 32


def test_yaml_roundtrip(tmp_path):
    cfg = toy_config(threshold=0.7)
    cfg.set_seed(3)
    path = dump_config(cfg, tmp_path / "c.yaml")
    back = load_config(path)
    assert back == cfg
    assert back.train.augment.seed == 3 and back.finetune.seed == 3


def test_dotted_overrides():
    cfg = apply_overrides(RunConfig(), {"train.batch_size": "32", "train.loss.temperature": "0.2"})
    assert cfg.train.batch_size == 32
    assert cfg.train.loss.temperature == 0.2
    cfg = apply_overrides(cfg, {"train.augment.spatial.crop_scale": "[0.3, 1.0]"})
    assert cfg.train.augment.spatial.crop_scale == (0.3, 1.0)


@pytest.mark.parametrize(
    "overrides",
    [
        {"train.nope": "1"},
        {"nope.batch_size": "1"},
        {"train.batch_size.x": "1"},
        {"train.batch_size": "1"},
        {"train.threshold": "1.5"},
        {"train.warmup_epochs": "400"},
        {"train.batch_size": "abc"},
        {"finetune.fraction": "0"},
    ],
)
def test_invalid_overrides(overrides):
    with pytest.raises(ConfigError):
        apply_overrides(RunConfig(), overrides)


def test_unknown_yaml_key(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("train:\n  epochs: 5\n")
    with pytest.raises(ConfigError):
        load_config(p)


def test_from_dict_partial():
    cfg = from_dict(TrainConfig, {"total_epochs": 10, "warmup_epochs": 4})
    assert cfg.total_epochs == 10 and cfg.batch_size == 256
    assert to_dict(cfg)["augment"]["K"] == 2
