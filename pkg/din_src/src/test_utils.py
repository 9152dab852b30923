"""Tests for utils.py pure functions."""
import pytest

from utils import (
    ConfigError,
    DataError,
    DinError,
    NumericalError,
    config_hash,
    err_field,
    err_invalid,
    err_mismatch,
    err_not_found,
    err_required,
    format_table,
    name_seed,
    parse_override,
)


class TestConfigHash:
    def test_key_order_irrelevant(self):
        assert config_hash({"a": 1, "b": 2}) == config_hash({"b": 2, "a": 1})

    def test_values_matter(self):
        assert config_hash({"a": 1}) != config_hash({"a": 2})

    def test_length(self):
        assert len(config_hash({})) == 32


class TestNameSeed:
    def test_deterministic(self):
        assert name_seed(3, "sfe.weight") == name_seed(3, "sfe.weight")

    def test_name_and_seed_matter(self):
        assert name_seed(3, "sfe.weight") != name_seed(3, "sfe.bias")
        assert name_seed(3, "sfe.weight") != name_seed(4, "sfe.weight")


class TestParseOverride:
    def test_integer(self):
        assert parse_override("model.growth=16") == ("model", "growth", 16)

    def test_float_and_bool(self):
        assert parse_override("train.lr0=1e-3") == ("train", "lr0", 1e-3)
        assert parse_override("model.use_gff=false") == ("model", "use_gff", False)

    def test_plain_string(self):
        assert parse_override("model.fusion_mode=concat") == ("model", "fusion_mode", "concat")

    def test_whitespace(self):
        assert parse_override(" train.seed = 7 ") == ("train", "seed", 7)

    @pytest.mark.parametrize("text", ["growth=16", "model.growth", "model.=3", ".growth=3"])
    def test_malformed(self, text):
        with pytest.raises(ConfigError, match="malformed"):
            parse_override(text)


class TestFormatTable:
    def test_alignment(self):
        table = format_table(["name", "n"], [["sfe", 448], ["head", 1824]])
        assert table.splitlines() == [
            "name  n",
            "----  ----",
            "sfe   448",
            "head  1824",
        ]


class TestErrors:
    def test_exit_codes(self):
        assert ConfigError("x").exit_code == 1
        assert NumericalError("x").exit_code == 2
        assert DataError("x").exit_code == 3

    def test_hierarchy(self):
        assert issubclass(ConfigError, ValueError)
        assert issubclass(DataError, OSError)
        for cls in (ConfigError, NumericalError, DataError):
            assert issubclass(cls, DinError)


class TestErrorFormatting:
    def test_err_not_found_basic(self):
        assert err_not_found("Profile", "huge") == "Profile 'huge' not found."

    def test_err_not_found_with_hint(self):
        result = err_not_found("Profile", "huge", "Available: desk, paper.")
        assert result == "Profile 'huge' not found. Available: desk, paper."

    def test_err_mismatch(self):
        assert err_mismatch("Channel count", 64, 32) == "Channel count mismatch: expected 64, got 32."

    def test_err_mismatch_with_hint(self):
        result = err_mismatch("Model scale", 2, 3, "Retrain at x3.")
        assert result == "Model scale mismatch: expected 2, got 3. Retrain at x3."

    def test_err_field(self):
        assert err_field("model.growth", "must be positive.") == "Field 'model.growth': must be positive."

    def test_err_required(self):
        assert err_required("--weights") == "--weights is required."

    def test_err_invalid_basic(self):
        assert err_invalid("Patch size must be positive.") == "Patch size must be positive."

    def test_err_invalid_with_hint(self):
        result = err_invalid("Override is malformed.", "Use section.key=value.")
        assert result == "Override is malformed. Use section.key=value."
