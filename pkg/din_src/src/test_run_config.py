"""Tests for run_config.py: profiles, config files and override layering."""
import json

import pytest

from din_blocks import ModelConfig
from run_config import list_profiles, load_profile, read_config_file, resolve_run_config
from training import TrainConfig
from utils import ConfigError


@pytest.fixture
def profiles_dir(tmp_path):
    directory = tmp_path / "profiles"
    directory.mkdir()
    (directory / "small.json").write_text(json.dumps({
        "model": {"branches": 2, "wrdbs_per_branch": 2, "base_channels": 16, "attn_reduction": 4},
        "train": {"batch_size": 2, "seed": 3},
    }))
    return directory


def write_config(tmp_path, data, name="run.json"):
    path = tmp_path / name
    path.write_text(data if isinstance(data, str) else json.dumps(data))
    return path


class TestShippedProfiles:
    def test_both_present(self):
        assert {"paper", "desk"} <= set(list_profiles())

    def test_paper_is_full_size_configuration(self):
        run = resolve_run_config("paper")
        assert run.model == ModelConfig()
        assert (run.train.batch_size, run.train.lr_patch) == (8, 50)

    def test_desk_is_tiny(self):
        run = resolve_run_config("desk")
        model = run.model
        assert (model.branches, model.wrdbs_per_branch, model.rdbs_per_wrdb, model.convs_per_rdb) == (2, 2, 1, 2)
        assert (model.growth, model.base_channels) == (8, 16)
        assert (run.train.batch_size, run.train.lr_patch) == (2, 16)


class TestReadConfigFile:
    def test_reports_line_and_column(self, tmp_path):
        path = write_config(tmp_path, '{\n  "model": {\n    "growth": 8,\n  }\n}')
        with pytest.raises(ConfigError, match=r"run\.json:4:3"):
            read_config_file(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="not found"):
            read_config_file(tmp_path / "absent.json")

    def test_unknown_section(self, tmp_path):
        with pytest.raises(ConfigError, match="unknown section"):
            read_config_file(write_config(tmp_path, {"optimizer": {}}))

    def test_section_must_be_object(self, tmp_path):
        with pytest.raises(ConfigError, match="must be an object"):
            read_config_file(write_config(tmp_path, {"model": [1, 2]}))

    def test_top_level_must_be_object(self, tmp_path):
        with pytest.raises(ConfigError, match="top level"):
            read_config_file(write_config(tmp_path, "[1]"))


class TestResolve:
    def test_defaults_without_profile(self, profiles_dir):
        run = resolve_run_config(None, profiles_dir=profiles_dir)
        assert run.model == ModelConfig() and run.train == TrainConfig()

    def test_profile(self, profiles_dir):
        run = resolve_run_config("small", profiles_dir=profiles_dir)
        assert run.model.branches == 2 and run.train.seed == 3
        assert run.model.growth == 32

    def test_layering_order(self, tmp_path, profiles_dir):
        path = write_config(tmp_path, {"model": {"growth": 8}, "train": {"seed": 5}})
        run = resolve_run_config("small", path, ["train.seed=9", "model.fusion_mode=sum"], profiles_dir)
        assert run.model.growth == 8
        assert run.train.seed == 9
        assert run.model.fusion == "sum" and run.model.use_asyca is False
        assert run.train.batch_size == 2

    def test_unknown_profile(self, profiles_dir):
        with pytest.raises(ConfigError, match="Available: small"):
            load_profile("huge", profiles_dir)

    def test_unknown_key(self, profiles_dir):
        with pytest.raises(ConfigError, match="model.width"):
            resolve_run_config("small", overrides=["model.width=3"], profiles_dir=profiles_dir)

    def test_unknown_override_section(self, profiles_dir):
        with pytest.raises(ConfigError, match="unknown section"):
            resolve_run_config("small", overrides=["data.root=x"], profiles_dir=profiles_dir)

    def test_invariant_violation_names_field(self, profiles_dir):
        with pytest.raises(ConfigError, match="model.attn_reduction"):
            resolve_run_config("small", overrides=["model.attn_reduction=5"], profiles_dir=profiles_dir)

    def test_wrong_type(self, profiles_dir):
        with pytest.raises(ConfigError, match="train.batch_size"):
            resolve_run_config("small", overrides=['train.batch_size="two"'], profiles_dir=profiles_dir)

    def test_snapshot(self, profiles_dir):
        snap = resolve_run_config("small", profiles_dir=profiles_dir).snapshot()
        assert set(snap) == {"model", "train"}
        assert snap["model"]["branches"] == 2
