import json

import pytest

from plgan.config import (RUN_CONFIG_KEYS, Ablation, ConfigError, EvalConfig, TrainConfig, dump_run_config,
                          from_flat, load_run_config, to_flat)


def test_defaults_cover_every_key():
    flat = to_flat()
    assert set(flat) == set(RUN_CONFIG_KEYS)
    assert flat["epochs"] == 200 and flat["lr0"] == 1e-4
    assert flat["adam_beta1"] == 0.5 and flat["adam_beta2"] == 0.999
    assert flat["image_size"] == 512 and flat["transform"] == "rot90cw"
    assert flat["hough_m"] == 180 and flat["hough_coord_mode"] == "centered_normalized"
    assert all(doc for *_, doc in RUN_CONFIG_KEYS.values())


def test_round_trip_lossless(tmp_path):
    train = TrainConfig(epochs=4, lr0=3e-4, image_size=64, ablation="G_S_HT", transform="hflip", seed=11)
    ev = EvalConfig(tolerance=1.5, aggregation="macro")
    text = dump_run_config(train, ev)
    (tmp_path / "c.json").write_text(text)
    train2, ev2 = load_run_config(tmp_path / "c.json")
    assert train2 == train and ev2 == ev
    assert dump_run_config(train2, ev2) == text


def test_unknown_key_rejected(tmp_path):
    (tmp_path / "c.json").write_text(json.dumps({"epochs": 2, "learning_rate": 0.1}))
    with pytest.raises(ConfigError, match="learning_rate"):
        load_run_config(tmp_path / "c.json")


def test_bad_values_rejected():
    with pytest.raises(ConfigError):
        from_flat({"epochs": 3})
    with pytest.raises(ConfigError):
        from_flat({"epochs": "many"})
    with pytest.raises(ConfigError):
        from_flat({"lambda_ht": -1})
    with pytest.raises(ConfigError):
        from_flat({"augment_flips": "maybe"})
    with pytest.raises(ConfigError):
        from_flat({"image_size": 30})


def test_string_coercion():
    train, _ = from_flat({"epochs": "4", "augment_flips": "true", "ablation": "G"})
    assert train.epochs == 4 and train.augment_flips is True and train.ablation is Ablation.G_ONLY


@pytest.mark.parametrize("ablation,expected", [
    ("G_only", (10.0, 0.0, 0.0)),
    ("G_S", (10.0, 0.0, 0.0)),
    ("G_S_HT", (10.0, 1.0, 0.0)),
    ("full", (10.0, 1.0, 20.0)),
])
def test_effective_weights(ablation, expected):
    w = TrainConfig(ablation=ablation).effective_weights
    assert (w.lambda_spl, w.lambda_ht, w.lambda_geo) == expected
