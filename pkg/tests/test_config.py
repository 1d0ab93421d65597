import json
from fractions import Fraction

import pytest

from fusion_detect.config import PROFILES, RunConfig, config_from_dict, load_config, preset, save_config
from fusion_detect.errors import ValidationError


def test_defaults_are_published_values():
    cfg = RunConfig()
    t, s, a = cfg.train, cfg.sampling, cfg.augmentation
    assert (t.learning_rate, t.momentum, t.batch_size, t.log_every) == (1e-3, 0.9, 20, 20)
    assert s.positive_band == (0.6, 1.0) and s.negative_band == (0.0, 0.3)
    assert a.darken_range == (0.5, 1.0) and a.brighten_range == (1.0, 1.5)
    assert cfg.model.input_dims == (224, 224, 3)
    assert cfg.model.block_filters == (64, 128, 256, 512, 512)
    assert cfg.model.width_scale == "1"
    assert cfg.model.head_box_features is False
    assert cfg.data.train_fraction == 0.8
    assert cfg.train.lr_decay_at == () and cfg.train.grad_clip == 0.0
    # head rois share the anchor bands unless a profile says otherwise
    assert cfg.sampling.roi_positive_band is None and cfg.sampling.roi_negative_band is None


def test_defaults_flow_into_library_configs():
    cfg = RunConfig()
    tc = cfg.train_config()
    assert (tc.learning_rate, tc.momentum, tc.batch_size, tc.log_every) == (1e-3, 0.9, 20, 20)
    assert tc.sampling.positive_band == (0.6, 1.0)
    assert cfg.backbone_config().feature_dims == (7, 7, 512)
    assert cfg.detect_config().score_threshold == 0.5


def test_json_round_trip(tmp_path):
    for name in PROFILES:
        cfg = preset(name)
        save_config(cfg, tmp_path / "c.json")
        assert load_config(tmp_path / "c.json") == cfg


def test_desk_profile():
    cfg = preset("desk")
    assert cfg.profile == "desk"
    assert cfg.backbone_config().width_scale == Fraction(1, 8)
    assert cfg.model.input_dims == (64, 64, 3) and cfg.model.head_box_features is True
    assert cfg.train.batch_size == 4 and cfg.train.iterations <= 3000
    # unrelated sections keep the defaults
    assert cfg.sampling.positive_band == (0.6, 1.0) and cfg.sampling.roi_positive_band is None


def test_file_overrides_profile():
    cfg = config_from_dict({"profile": "desk", "train": {"batch_size": 2}})
    assert cfg.train.batch_size == 2 and cfg.train.learning_rate == preset("desk").train.learning_rate


@pytest.mark.parametrize("data,needle", [
    ({"trian": {}}, "trian: unknown key"),
    ({"train": {"learning_rte": 0.1}}, "train.learning_rte: unknown key"),
    ({"profile": "huge"}, "unknown profile"),
    ({"model": {"width_scale": "abc"}}, "width_scale"),
    ({"model": {"width_scale": "-1/2"}}, "width_scale"),
    ({"model": {"class_names": []}}, "class_names"),
    ({"train": {"batch_size": "many"}}, "train.batch_size"),
])
def test_rejections(data, needle):
    with pytest.raises(ValidationError, match=needle.replace(".", r"\.")):
        config_from_dict(data)


def test_load_errors_name_the_file(tmp_path):
    with pytest.raises(ValidationError, match="not found"):
        load_config(tmp_path / "missing.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{")
    with pytest.raises(ValidationError, match="bad.json"):
        load_config(bad)
    bad.write_text(json.dumps({"seed": 1, "extra": 2}))
    with pytest.raises(ValidationError, match="extra: unknown key"):
        load_config(bad)


def test_anchor_shapes_required_for_detector_config():
    with pytest.raises(ValidationError):
        RunConfig().detector_config()
    cfg = config_from_dict({"anchors": {"shapes": [[10, 20], [30, 30]]}})
    assert cfg.detector_config().anchors.k == 2


def test_width_scale_normalised():
    assert config_from_dict({"model": {"width_scale": 0.125}}).model.width_scale == "1/8"
