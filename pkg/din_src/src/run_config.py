"""Resolve profile + config file + --set overrides into one run config."""
import json
import logging
from dataclasses import dataclass
from pathlib import Path

from din_blocks import ModelConfig
from training import TrainConfig
from utils import PROFILES_DIR, ConfigError, err_field, err_invalid, err_not_found, parse_override

logger = logging.getLogger(__name__)

SECTIONS = ("model", "train")


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig
    train: TrainConfig

    def snapshot(self) -> dict:
        return {"model": self.model.snapshot(), "train": self.train.snapshot()}


def list_profiles(profiles_dir: Path = PROFILES_DIR) -> list[str]:
    return sorted(p.stem for p in Path(profiles_dir).glob("*.json"))


def read_config_file(path: Path) -> dict:
    """Parse a JSON config; syntax errors report line and column."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(err_not_found("Config file", str(path)))
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc
    if not isinstance(data, dict):
        raise ConfigError(err_invalid(f"{path}: top level must be an object with 'model' and/or 'train'."))
    for section, values in data.items():
        if section not in SECTIONS:
            raise ConfigError(err_field(section, "unknown section.", f"Use one of {', '.join(SECTIONS)}."))
        if not isinstance(values, dict):
            raise ConfigError(err_field(section, "must be an object."))
    return data


def load_profile(name: str, profiles_dir: Path = PROFILES_DIR) -> dict:
    path = Path(profiles_dir) / f"{name}.json"
    if not path.is_file():
        available = ", ".join(list_profiles(profiles_dir)) or "none"
        raise ConfigError(err_not_found("Profile", name, f"Available: {available}."))
    return read_config_file(path)


def _merge(base: dict, extra: dict) -> dict:
    merged = {section: dict(base.get(section, {})) for section in SECTIONS}
    for section, values in extra.items():
        merged.setdefault(section, {}).update(values)
    return merged


def resolve_run_config(
    profile: str | None = None,
    config_path: Path | None = None,
    overrides: list[str] | None = None,
    profiles_dir: Path = PROFILES_DIR,
) -> RunConfig:
    """Layering: dataclass defaults < profile < config file < overrides."""
    data: dict = {section: {} for section in SECTIONS}
    if profile:
        data = _merge(data, load_profile(profile, profiles_dir))
    if config_path:
        data = _merge(data, read_config_file(config_path))
    for text in overrides or []:
        section, key, value = parse_override(text)
        if section not in SECTIONS:
            raise ConfigError(err_field(f"{section}.{key}", "unknown section.", f"Use one of {', '.join(SECTIONS)}."))
        data[section][key] = value
    try:
        run = RunConfig(ModelConfig.from_dict(data["model"]), TrainConfig.from_dict(data["train"]))
    except TypeError as exc:
        raise ConfigError(err_invalid(f"Invalid config: {exc}")) from exc
    logger.debug("Resolved config: %s", run.snapshot())
    return run
