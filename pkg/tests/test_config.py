import pytest

from ssvtcn.config import Config, ConfigError, config_from_dict, load_config


def test_defaults_carry_training_hyperparameters():
    cfg = Config()
    assert (cfg.model.levels, cfg.model.channels, cfg.train.lr, cfg.train.epochs) == (8, 8, 0.005, 8)
    s = cfg.settings()
    assert s.quantile == 0.05 and s.batch_size == 32 and s.labeled_fraction == 0.4


def test_toml_file(tmp_path):
    path = tmp_path / "c.toml"
    path.write_text('seed = 4\n[model]\nlevels = 3\nsigma = 2\n[grid]\nmodes = ["vtcn"]\n', encoding="utf-8")
    cfg = load_config(path)
    assert cfg.seed == 4 and cfg.model.levels == 3 and cfg.model.sigma == 2.0
    assert cfg.model.channels == 8


@pytest.mark.parametrize("raw, match", [
    ({"sedd": 1}, "sedd"),
    ({"model": {"level": 3}}, "level"),
    ({"model": {"levels": "3"}}, "expected int"),
    ({"train": {"lr": True}}, "expected float"),
    ({"grid": {"modes": ["nope"]}}, "unknown mode"),
    ({"synth": {"priors": [1.0, 1.0, 1.0, 1.0]}}, "sum to 1"),
    ({"detector": {"quantile": 0.7}}, "quantile"),
    ({"split": {"labeled_fraction": 0}}, "labeled_fraction"),
    ({"data": 3}, "table"),
])
def test_bad_configs_are_rejected(raw, match):
    with pytest.raises(ConfigError, match=match):
        config_from_dict(raw)


def test_unreadable_files(tmp_path):
    with pytest.raises(ConfigError, match="missing.toml"):
        load_config(tmp_path / "missing.toml")
    bad = tmp_path / "bad.toml"
    bad.write_text("[model\n", encoding="utf-8")
    with pytest.raises(ConfigError, match="bad.toml"):
        load_config(bad)


def test_flag_overrides_win():
    cfg = config_from_dict({"seed": 1, "split": {"labeled_fraction": 0.3}}).with_overrides(seed=9, labeled_ratio=0.2)
    assert cfg.seed == 9 and cfg.split.labeled_fraction == 0.2
    assert load_config(None) == Config()


def test_label_map(tmp_path):
    cfg = config_from_dict({"data": {"label_map": {"normal": 0, "DoSattack": 1, "spying": 3}}})
    schema = cfg.data.schema()
    assert schema.class_of("DoSattack") == 1 and schema.class_of("dos") is None
    with pytest.raises(ConfigError, match="label_map"):
        config_from_dict({"data": {"label_map": {"normal": "zero"}}})
