"""Centralized repository instances for run artifacts.

Training and commands import repository instances from this module so tests
can patch one place.
"""
import json
from pathlib import Path

from din_blocks import ModelConfig
from repository_files import (
    FileCheckpointRepository,
    FileWeightRepository,
    JsonManifestRepository,
    NdjsonRecordRepository,
)
from utils import DataError, err_invalid, err_not_found

MODEL_FILE = "model.json"
WEIGHTS_FILE = "weights.dinw"
RECORDS_FILE = "records.ndjson"

# Global repository instances used throughout the application
weight_repo = FileWeightRepository()
checkpoint_repo = FileCheckpointRepository(weight_repo)
record_repo = NdjsonRecordRepository()
manifest_repo = JsonManifestRepository()


def save_model_config(out_dir: Path, cfg: ModelConfig) -> Path:
    """Write the model config snapshot that inference needs next to the weights."""
    path = Path(out_dir) / MODEL_FILE
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(cfg.snapshot(), indent=2))
    return path


def load_model_config(weights_path: Path) -> ModelConfig:
    """Read model.json from the directory holding `weights_path`."""
    path = Path(weights_path).parent / MODEL_FILE
    if not path.is_file():
        raise DataError(err_not_found("Model config", str(path), "Pass --config with the model section used for training."))
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(err_invalid(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}")) from exc
    return ModelConfig.from_dict(data)
