"""
Tests for loss/pipeline config files and runtime settings.
"""

import json

import pytest

from config import (
    ENV_SEED,
    ENV_THREADS,
    LOSS_PRESETS,
    RuntimeSettings,
    load_loss_config,
    load_pipeline_config,
    loss_config_from_dict,
    pipeline_config_from_dict,
)
from errors import ConfigError


class TestRuntimeSettings:
    def test_defaults(self):
        assert RuntimeSettings.resolve() == RuntimeSettings(seed=0, threads=1)

    def test_environment(self, monkeypatch):
        monkeypatch.setenv(ENV_SEED, "42")
        monkeypatch.setenv(ENV_THREADS, "4")
        assert RuntimeSettings.resolve() == RuntimeSettings(seed=42, threads=4)

    def test_explicit_wins(self, monkeypatch):
        monkeypatch.setenv(ENV_SEED, "42")
        assert RuntimeSettings.resolve(seed=7).seed == 7

    def test_bad_environment(self, monkeypatch):
        monkeypatch.setenv(ENV_THREADS, "many")
        with pytest.raises(ConfigError) as info:
            RuntimeSettings.resolve()
        assert info.value.field == ENV_THREADS
        monkeypatch.setenv(ENV_THREADS, "0")
        with pytest.raises(ConfigError):
            RuntimeSettings.resolve()


class TestLossConfig:
    def test_defaults(self):
        config = load_loss_config()
        assert config.weights.as_tuple() == (1.0, 0.4, 5.0, 2.0, 2.0, 2.0)
        assert config.use_distortion

    @pytest.mark.parametrize("preset", sorted(LOSS_PRESETS))
    def test_presets(self, preset):
        config = loss_config_from_dict({}, preset)
        assert config.preset == preset
        assert config.weights.to_dict() == LOSS_PRESETS[preset]["weights"]
        assert config.use_distortion == LOSS_PRESETS[preset]["use_distortion"]

    def test_ablation_ladder(self):
        assert not loss_config_from_dict({}, "silog-only").use_distortion
        assert loss_config_from_dict({}, "distortion").use_distortion
        geometry = loss_config_from_dict({}, "geometry").weights
        assert geometry.normal == 2.0 and geometry.pts == 2.0 and geometry.df == 0.0

    def test_file_overrides_preset(self, tmp_path):
        path = tmp_path / "loss.toml"
        path.write_text('preset = "geometry"\nsilog_lambda = 0.5\n\n[weights]\npts = 1\n')
        config = load_loss_config(path)
        assert config.silog_lambda == 0.5
        assert config.weights.pts == 1.0
        assert config.weights.normal == 2.0

    def test_json_file(self, tmp_path):
        path = tmp_path / "loss.json"
        path.write_text(json.dumps({"mask_variant": "bce_dice", "weights": {"mask": 0.0}}))
        config = load_loss_config(path)
        assert config.mask_variant == "bce_dice"
        assert config.weights.mask == 0.0

    @pytest.mark.parametrize("data,field", [
        ({"weights": {"silog": -1.0}}, "weights.silog"),
        ({"weights": {"chamfer": 1.0}}, "weights.chamfer"),
        ({"weights": {"grad": True}}, "weights.grad"),
        ({"silog_lambda": "high"}, "silog_lambda"),
        ({"use_distrotion": False}, "use_distrotion"),
        ({"preset": "tiny"}, "preset"),
    ])
    def test_errors_name_the_field(self, data, field):
        with pytest.raises(ConfigError) as info:
            loss_config_from_dict(data)
        assert info.value.field == field

    def test_unparseable_file(self, tmp_path):
        path = tmp_path / "loss.toml"
        path.write_text("weights = [")
        with pytest.raises(ConfigError):
            load_loss_config(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_loss_config(tmp_path / "nope.toml")


PIPELINE_TOML = """
[pipeline]
output_dir = "runs"
workers = 2
retry_delay = 0

[[stage]]
name = "scene-invariant-labeler"
source = "source.jsonl"
labeler = "label {input_list_path} {output_dir}"
scorer = "score {pair_list_path}"
k_indoor = 1
k_outdoor = 2

[[stage]]
name = "realism-invariant-labeler"
source = "@scene-invariant-labeler"
seed = 5

[[stage.mix]]
manifest = "synthetic.jsonl"
weight = 2
"""


class TestPipelineConfig:
    def test_parse(self, tmp_path):
        path = tmp_path / "pipeline.toml"
        path.write_text(PIPELINE_TOML)
        cfg = load_pipeline_config(path)
        assert cfg.output_dir == tmp_path.resolve() / "runs"
        assert cfg.workers == 2 and cfg.seed == 0
        assert [s.name for s in cfg.stages] == ["scene-invariant-labeler", "realism-invariant-labeler"]
        assert cfg.stages[1].mix[0].weight == 2.0
        assert cfg.stages[1].seed == 5
        assert cfg.resolve("@scene-invariant-labeler") == cfg.output_dir / "scene-invariant-labeler" / "output.jsonl"

    def test_overrides(self, tmp_path):
        path = tmp_path / "pipeline.toml"
        path.write_text(PIPELINE_TOML)
        cfg = load_pipeline_config(path, seed=9, workers=1, default_seed=3)
        assert cfg.seed == 9 and cfg.workers == 1
        assert load_pipeline_config(path, default_seed=3).seed == 3

    def test_file_seed_beats_default(self, tmp_path):
        path = tmp_path / "pipeline.toml"
        path.write_text(PIPELINE_TOML.replace("workers = 2", "workers = 2\nseed = 8"))
        assert load_pipeline_config(path, default_seed=3).seed == 8

    def test_file_workers_beat_default(self, tmp_path):
        path = tmp_path / "pipeline.toml"
        path.write_text(PIPELINE_TOML)
        assert load_pipeline_config(path, default_workers=6).workers == 2
        path.write_text(PIPELINE_TOML.replace("workers = 2\n", ""))
        assert load_pipeline_config(path, default_workers=6).workers == 6

    @pytest.mark.parametrize("old,new,field", [
        ('k_outdoor = 2', 'k_outdoor = "two"', "stage[0].k_outdoor"),
        ('scorer = "score {pair_list_path}"', 'scorer = "score {pairs}"', "stage[0].scorer"),
        ('source = "@scene-invariant-labeler"', 'source = "@later"', "stage[1].source"),
        ('workers = 2', 'workers = 0', "pipeline.workers"),
        ('workers = 2', 'threads = 2', "pipeline.threads"),
        ('weight = 2', 'weight = -1', "stage[1].mix[0].weight"),
    ])
    def test_errors_name_the_field(self, tmp_path, old, new, field):
        path = tmp_path / "pipeline.toml"
        path.write_text(PIPELINE_TOML.replace(old, new))
        with pytest.raises(ConfigError) as info:
            load_pipeline_config(path)
        assert info.value.field == field

    def test_missing_stage_name(self):
        with pytest.raises(ConfigError) as info:
            pipeline_config_from_dict({"stage": [{"source": "a.jsonl"}]}, ".")
        assert info.value.field == "stage[0].name"
