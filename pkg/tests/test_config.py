import json

import pytest

from efagg.config import ConfigError, RunConfig, load_config, merged_fields, shipped_presets


def test_defaults_are_paper_scale():
    cfg = RunConfig(variant="ba")
    assert cfg.latent_dim == 128 and cfg.steps == 100_000 and cfg.batch_size == 16
    assert cfg.corruption_grid == [0.05, 0.08, 0.11, 0.13, 0.15]
    assert cfg.latent_samples() == 5
    assert RunConfig(variant="mba").latent_samples() == 10


def test_required_presets_ship():
    assert {"desk-rbf", "desk-matern", "paper-rbf", "paper-matern", "smoke"} <= set(shipped_presets())
    for name in shipped_presets():
        load_config(preset=name, overrides={"variant": "rba"})


def test_round_trip_lossless():
    cfg = load_config(preset="desk-matern", overrides={"variant": "rba", "seeds": [3, 4]})
    assert RunConfig.from_json(cfg.to_json()) == cfg


def test_missing_variant_names_field():
    with pytest.raises(ConfigError, match="variant"):
        load_config(preset="smoke")


@pytest.mark.parametrize("bad", [{"variant": "cnp"}, {"family": "periodic"}, {"steps": 0}, {"seeds": []},
                                 {"robust_prior": {"a0": 1.0}}, {"corruption_grid": [-0.1]}])
def test_invalid_fields(bad):
    with pytest.raises(ConfigError):
        load_config(overrides={"variant": "ba", **bad})


def test_unknown_field_rejected():
    with pytest.raises(ConfigError, match="bogus"):
        RunConfig.from_dict({"variant": "ba", "bogus": 1})


def test_file_layers(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"presets": {"mine": {"steps": 7}}, "run": {"preset": "mine", "variant": "np"}}))
    cfg = load_config(p, overrides={"batch_size": 3, "k": None})
    assert (cfg.steps, cfg.variant, cfg.batch_size, cfg.k) == (7, "np", 3, 2)
    flat = tmp_path / "flat.json"
    flat.write_text(json.dumps({"variant": "ba", "latent_dim": 4}))
    assert merged_fields(flat) == {"variant": "ba", "latent_dim": 4}


def test_file_errors(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "none.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{")
    with pytest.raises(ConfigError):
        load_config(bad)
    with pytest.raises(ConfigError, match="preset"):
        load_config(preset="nope")
