import json

import pytest

from contsep.config import ExperimentConfig, apply_overrides, load_config
from contsep.errors import ConfigError


def test_method_weights():
    cfg = ExperimentConfig()
    assert cfg.loss_weights().lambda_cls == 0.3
    ft = cfg.with_overrides(method="finetune").loss_weights()
    assert (ft.lambda_ins, ft.lambda_cls, ft.lambda_dist) == (0.0, 0.0, 0.0)
    do = cfg.with_overrides(method="distill_only").loss_weights()
    assert (do.lambda_ins, do.lambda_cls, do.lambda_dist) == (0.0, 0.0, 0.3)
    assert not cfg.with_overrides(method="upper_bound").uses_memory


@pytest.mark.parametrize("kw", [dict(method="ewc"), dict(num_tasks=21), dict(num_tasks=0),
                                dict(similarity_mode="diag"), dict(memory_per_class=0),
                                dict(lr=0.0), dict(seeds=()), dict(train_crop_frames=500),
                                dict(profile="studio"), dict(model={"nope": 1})])
def test_invalid_configs(kw):
    with pytest.raises(ConfigError):
        ExperimentConfig(**kw)


def test_overrides_are_typed():
    cfg = apply_overrides(ExperimentConfig(), ["steps_per_task=5", "lr=0.01", "seeds=4,5",
                                               "symmetric_anchors=false", "clip_norm=none",
                                               "model.freq_embed=false"])
    assert cfg.steps_per_task == 5 and cfg.lr == 0.01 and cfg.seeds == (4, 5)
    assert cfg.symmetric_anchors is False and cfg.clip_norm is None
    assert cfg.separator_config().freq_embed is False
    for bad in (["nokey"], ["bogus=1"], ["steps_per_task=x"], ["symmetric_anchors=maybe"]):
        with pytest.raises(ConfigError):
            apply_overrides(ExperimentConfig(), bad)


def test_load_config_file(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"method": "finetune", "seeds": [3]}))
    cfg = load_config(path, ["batch_size=4"])
    assert cfg.method == "finetune" and cfg.seeds == (3,) and cfg.batch_size == 4
    path.write_text(json.dumps({"colour": 1}))
    with pytest.raises(ConfigError):
        load_config(path)
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.json")


def test_hash_tracks_content():
    a = ExperimentConfig()
    assert a.hash() == ExperimentConfig().hash()
    assert a.hash() != a.with_overrides(lr=1e-3).hash()
    assert ExperimentConfig(**json.loads(json.dumps(a.to_dict()))).hash() == a.hash()
