import pytest
import yaml

from segbank.config import (ConfigError, TrainConfig, config_from_dict,
                            config_to_dict, load_config, merge_overrides)


def _minimal():
    return {"data": {"root": "/tmp/x", "class_count": 3}}


def test_defaults_match_published_settings():
    cfg = config_from_dict(_minimal())
    assert cfg.total_iters == 150000
    assert cfg.warmup_iters == 2000
    assert cfg.tau_start == 0.995 and cfg.tau_end == 1.0
    assert cfg.phi == 0.95 and cfg.psi == 256
    assert cfg.sharpen_s == 6.0
    assert cfg.num_augmentations == 2
    assert cfg.loss.lam_sup == 1.0 and cfg.loss.lam_pseudo == 1.0
    assert cfg.loss.lam_ent == 0.01 and cfg.loss.lam_contr == 0.1
    assert cfg.optim.momentum == 0.9 and cfg.optim.poly_power == 0.9
    assert cfg.aug_weak.flip_p == 0.5 and cfg.aug_weak.blur_p == 0.0
    assert cfg.aug_strong.resize_p == 0.8 and cfg.aug_strong.classmix_p == 0.8
    assert cfg.aug_strong.resize_range == (0.75, 1.75)


def test_unknown_top_level_key_rejected():
    raw = _minimal()
    raw["warmup_itres"] = 100
    with pytest.raises(ConfigError, match="warmup_itres"):
        config_from_dict(raw)


def test_unknown_nested_key_rejected():
    raw = _minimal()
    raw["optim"] = {"lr": 0.1}
    with pytest.raises(ConfigError, match="optim.lr"):
        config_from_dict(raw)
    raw = _minimal()
    raw["augmentation"] = {"weak": {"flipp": 0.4}}
    with pytest.raises(ConfigError, match="flipp"):
        config_from_dict(raw)


def test_validation_errors():
    raw = _minimal()
    raw.update({"total_iters": 100, "warmup_iters": 100})
    with pytest.raises(ConfigError, match="warmup"):
        config_from_dict(raw)
    raw = _minimal()
    raw["phi"] = 1.5
    with pytest.raises(ConfigError, match="phi"):
        config_from_dict(raw)
    raw = _minimal()
    raw["contrastive_inputs"] = "nothing"
    with pytest.raises(ConfigError, match="contrastive_inputs"):
        config_from_dict(raw)
    with pytest.raises(ConfigError, match="class_count"):
        config_from_dict({})
    raw = _minimal()
    raw["domain_adaptation"] = True
    with pytest.raises(ConfigError, match="domain_manifest"):
        config_from_dict(raw)


def test_augmentation_partial_override():
    raw = _minimal()
    raw["augmentation"] = {"strong": {"blur_p": 0.5}}
    cfg = config_from_dict(raw)
    assert cfg.aug_strong.blur_p == 0.5
    assert cfg.aug_strong.flip_p == 0.5  # untouched defaults survive
    assert cfg.aug_weak.blur_p == 0.0


def test_yaml_roundtrip(tmp_path):
    raw = _minimal()
    raw.update({"total_iters": 50, "warmup_iters": 5,
                "loss": {"lam_contr": 0.25}})
    p = tmp_path / "cfg.yaml"
    p.write_text(yaml.safe_dump(raw), encoding="utf-8")
    cfg = load_config(p)
    assert cfg.total_iters == 50 and cfg.loss.lam_contr == 0.25
    d = config_to_dict(cfg)
    cfg2 = config_from_dict(d)
    assert cfg2 == cfg


def test_empty_file_needs_class_count(tmp_path):
    p = tmp_path / "cfg.yaml"
    p.write_text("", encoding="utf-8")
    with pytest.raises(ConfigError):
        load_config(p)


def test_merge_overrides_nested():
    base = {"a": {"b": 1, "c": 2}, "d": 3}
    out = merge_overrides(base, {"a": {"c": 9}, "e": 4})
    assert out == {"a": {"b": 1, "c": 9}, "d": 3, "e": 4}
    assert base["a"]["c"] == 2  # base untouched
