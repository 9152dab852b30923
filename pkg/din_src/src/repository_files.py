"""File-based repository implementations."""
import json
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional

import numpy as np

from repository import CheckpointRepository, ManifestRepository, RecordRepository, WeightRepository
from tensor_engine import decode_parameters, encode_parameters
from utils import ConfigError, DataError, err_invalid, err_mismatch, err_not_found

CHECKPOINT_FILE = "checkpoint.dinw"
OPTIMIZER_FILE = "optimizer.dinw"
TRAINER_FILE = "trainer.json"
MANIFEST_FILE = "manifest.json"


class FileWeightRepository(WeightRepository):
    """DINW binary containers on disk."""

    def save_weights(self, path: Path, arrays: Dict[str, np.ndarray], config_digest: Optional[bytes] = None) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(path.suffix + ".tmp")
        tmp.write_bytes(encode_parameters(arrays, config_digest))
        tmp.replace(path)
        return path

    def load_weights(self, path: Path, expected_digest: Optional[bytes] = None) -> Dict[str, np.ndarray]:
        path = Path(path)
        if not path.is_file():
            raise DataError(err_not_found("Weight file", str(path)))
        try:
            arrays, digest = decode_parameters(path.read_bytes())
        except ValueError as exc:
            raise DataError(err_invalid(f"Weight file '{path}' is corrupt: {exc}")) from exc
        if expected_digest is not None and digest != expected_digest:
            raise ConfigError(err_mismatch(
                f"Config hash of '{path.name}'", expected_digest.hex()[:16], digest.hex()[:16],
                "The weights were produced by a different model config.",
            ))
        return arrays


class FileCheckpointRepository(CheckpointRepository):
    """checkpoint.dinw + optimizer.dinw + trainer.json inside the run directory."""

    def __init__(self, weights: WeightRepository | None = None):
        self.weights = weights or FileWeightRepository()

    def save_checkpoint(self, run_dir: Path, params: Dict[str, np.ndarray], moments: Dict[str, np.ndarray],
                        trainer: Dict[str, Any], config_digest: bytes) -> None:
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        self.weights.save_weights(run_dir / CHECKPOINT_FILE, params, config_digest)
        self.weights.save_weights(run_dir / OPTIMIZER_FILE, moments, config_digest)
        payload = dict(trainer, config_hash=config_digest.hex())
        tmp = run_dir / (TRAINER_FILE + ".tmp")
        tmp.write_text(json.dumps(payload, indent=2))
        tmp.replace(run_dir / TRAINER_FILE)

    def load_checkpoint(self, run_dir: Path, config_digest: bytes) -> Optional[Dict[str, Any]]:
        run_dir = Path(run_dir)
        if not self.has_checkpoint(run_dir):
            return None
        trainer = json.loads((run_dir / TRAINER_FILE).read_text())
        if trainer.get("config_hash") != config_digest.hex():
            raise ConfigError(err_invalid(
                f"Checkpoint in '{run_dir}' was written by a different config.",
                "Use a fresh output directory or the original config.",
            ))
        return {
            "params": self.weights.load_weights(run_dir / CHECKPOINT_FILE, config_digest),
            "moments": self.weights.load_weights(run_dir / OPTIMIZER_FILE, config_digest),
            "trainer": trainer,
        }

    def has_checkpoint(self, run_dir: Path) -> bool:
        run_dir = Path(run_dir)
        return all((run_dir / name).is_file() for name in (CHECKPOINT_FILE, OPTIMIZER_FILE, TRAINER_FILE))


class NdjsonRecordRepository(RecordRepository):
    """One JSON object per line, keys in a stable order."""

    def append_records(self, path: Path, records: Iterable[Dict[str, Any]]) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("a", encoding="utf-8") as fh:
            for record in records:
                fh.write(json.dumps(record) + "\n")

    def read_records(self, path: Path) -> List[Dict[str, Any]]:
        path = Path(path)
        if not path.is_file():
            return []
        return [json.loads(line) for line in path.read_text(encoding="utf-8").splitlines() if line.strip()]

    def truncate_records(self, path: Path, keep_steps: int) -> None:
        path = Path(path)
        if not path.is_file():
            return
        kept = [r for r in self.read_records(path) if r["step"] < keep_steps]
        path.write_text("".join(json.dumps(r) + "\n" for r in kept), encoding="utf-8")


class JsonManifestRepository(ManifestRepository):
    """manifest.json in the output directory."""

    def save_manifest(self, out_dir: Path, data: Dict[str, Any]) -> Path:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        path = out_dir / MANIFEST_FILE
        path.write_text(json.dumps(data, indent=2))
        return path
