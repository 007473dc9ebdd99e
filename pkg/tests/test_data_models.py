import pytest
from pydantic import ValidationError

from data_models import ConfigError, RunConfig, SyntheticConfig, TrajectoryRecord, build_config, validate_rows


def test_default_config_derives_desk_lengths():
    config = RunConfig()
    assert config.past_len == 4 and config.future_len == 8
    assert config.horizon_steps() == {1.0: 2, 2.0: 4, 3.0: 6, 4.0: 8}


def test_kitti_like_preset_uses_tenth_second_steps():
    config = build_config({"preset": "kitti-like"})
    assert config.sample_period == 0.1
    assert config.past_len == 20 and config.future_len == 40
    assert SyntheticConfig.kitti_like().track_len == 60


def test_k_list_parsing_sorts_and_dedupes():
    assert RunConfig(k_list="5, 1,5,20").k_list == [1, 5, 20]


def test_k_list_rejects_zero():
    try:
        RunConfig(k_list="0,5")
    except ValidationError as e:
        assert any(err["loc"] == ("k_list",) for err in e.errors())
    else:
        raise AssertionError("Expected ValidationError for k=0")


def test_decoder_width_must_be_sum_of_encoders():
    with pytest.raises(ConfigError, match="decoder_hidden"):
        build_config({"past_hidden": 16, "future_hidden": 16, "decoder_hidden": 48})


def test_horizon_must_be_whole_number_of_steps():
    with pytest.raises(ConfigError, match="past_seconds"):
        build_config({"past_seconds": 1.25})


def test_past_needs_two_points():
    with pytest.raises(ConfigError):
        build_config({"past_seconds": 0.5})


def test_unknown_key_is_a_config_error():
    with pytest.raises(ConfigError, match="learning_rat"):
        build_config({"learning_rat": 0.1})


def test_unknown_preset_rejected():
    with pytest.raises(ConfigError, match="preset"):
        build_config({"preset": "highway"})


def test_controller_optimizer_is_validated():
    assert RunConfig().controller_optimizer == "adam"
    assert build_config({"controller_optimizer": " SGD "}).controller_optimizer == "sgd"
    with pytest.raises(ConfigError, match="controller_optimizer"):
        build_config({"controller_optimizer": "rmsprop"})


# -----------------
# Canonical text and hash
# -----------------

def test_canonical_text_is_sorted_key_value_lines():
    lines = RunConfig().canonical_text().splitlines()
    keys = [ln.split("=", 1)[0] for ln in lines]
    assert keys == sorted(keys)
    assert "branch_probability=" in lines
    assert "no_controller=false" in lines


def test_hash_ignores_directories_and_evaluation_settings():
    base = RunConfig().config_hash()
    assert RunConfig(data_dir="/tmp/elsewhere", out_dir="x").config_hash() == base
    assert RunConfig(k_list="1,5", no_refine=True, online_runs=3).config_hash() == base


def test_hash_changes_with_training_settings():
    base = RunConfig().config_hash()
    assert RunConfig(seed=1).config_hash() != base
    assert RunConfig(learning_rate=1e-3).config_hash() != base
    assert RunConfig(no_controller=True).config_hash() != base


def test_ablations_lists_enabled_flags():
    assert RunConfig().ablations() == []
    assert RunConfig(no_refine=True, no_encdec=True).ablations() == ["no_refine", "no_encdec"]


def test_synthetic_view_carries_lengths():
    synthetic = RunConfig(extra_points=3, n_junction=5).synthetic()
    assert synthetic.track_len == 15
    assert synthetic.n_junction == 5


# -----------------
# Dataset rows
# -----------------

def test_trajectory_record_coerces_numeric_id():
    rec = TrajectoryRecord(track_id=17, t="0.5", x=1, y=2)
    assert rec.track_id == "17" and rec.t == 0.5


def test_trajectory_record_rejects_non_finite():
    with pytest.raises(ValidationError):
        TrajectoryRecord(track_id="a", t=0.0, x=float("inf"), y=0.0)


def test_validate_rows_splits_valid_and_invalid():
    rows = [
        {"track_id": "a", "t": 0.0, "x": 0.0, "y": 0.0},
        {"track_id": "", "t": 0.5, "x": 0.0, "y": 0.0},
        {"track_id": "a", "t": 1.0, "x": "nan", "y": 0.0},
    ]
    valid, errors = validate_rows(rows, TrajectoryRecord)
    assert len(valid) == 1
    assert [idx for idx, _ in errors] == [1, 2]
