import json

import pytest

from liftseg.config import ConfigError, PipelineConfig, load_config, save_config, tiny_config


def test_defaults_and_round_trip(tmp_path):
    cfg = PipelineConfig()
    assert (cfg.loss.obj, cfg.loss.dice, cfg.loss.ce) == (2.0, 2.0, 5.0)
    assert cfg.pseudo.tau_c == 0.75 and cfg.geometry.voxel_size == 0.02
    save_config(cfg, tmp_path / "c.json")
    back = load_config(tmp_path / "c.json")
    assert back.to_dict() == cfg.to_dict() and back.config_hash() == cfg.config_hash()
    assert cfg.sam3d_radius == pytest.approx(2 * cfg.geometry.voxel_size)


def test_hash_changes_with_content():
    a, b = PipelineConfig(), tiny_config()
    assert a.config_hash() != b.config_hash() and len(a.config_hash()) == 16
    assert a.provenance()["config_hash"] == a.config_hash()


def test_unknown_and_mistyped_keys():
    with pytest.raises(ConfigError, match="unknown key"):
        PipelineConfig.from_dict({"stage1": {"stepz": 3}})
    with pytest.raises(ConfigError, match="integer"):
        PipelineConfig.from_dict({"stage1": {"steps": 2.5}})
    with pytest.raises(ConfigError, match="true/false"):
        PipelineConfig.from_dict({"synth": {"perturb": "yes"}})


@pytest.mark.parametrize("doc,msg", [
    ({"geometry": {"voxel_size": -0.1}}, "voxel_size"),
    ({"pseudo": {"tau_c": 1.5}}, "tau_c"),
    ({"model": {"feature_dim": 30, "heads": 4}}, "heads"),
    ({"sam3d": {"theta": 0.0}}, "theta"),
    ({"schema_version": 9}, "schema_version"),
])
def test_validation_messages(doc, msg):
    with pytest.raises(ConfigError, match=msg):
        PipelineConfig.from_dict(doc)


def test_invalid_json(tmp_path):
    (tmp_path / "bad.json").write_text("{nope")
    with pytest.raises(ConfigError, match="invalid JSON"):
        load_config(tmp_path / "bad.json")


def test_tiny_overrides():
    cfg = tiny_config(stage1__steps=5, synth__perturb=True)
    assert cfg.stage1.steps == 5 and cfg.synth.perturb and cfg.geometry.voxel_size == 0.08
    assert json.loads(json.dumps(cfg.to_dict())) == cfg.to_dict()
