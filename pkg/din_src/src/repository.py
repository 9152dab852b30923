"""Repository pattern for run artifact persistence."""
from abc import ABC, abstractmethod
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional

import numpy as np


class WeightRepository(ABC):
    """Abstract interface for parameter containers."""

    @abstractmethod
    def save_weights(self, path: Path, arrays: Dict[str, np.ndarray], config_digest: Optional[bytes] = None) -> Path:
        """Write named arrays, tagged with the hash of the config that produced them."""

    @abstractmethod
    def load_weights(self, path: Path, expected_digest: Optional[bytes] = None) -> Dict[str, np.ndarray]:
        """Read named arrays. Raises ConfigError when the stored hash differs from `expected_digest`."""


class CheckpointRepository(ABC):
    """Abstract interface for resumable training state."""

    @abstractmethod
    def save_checkpoint(self, run_dir: Path, params: Dict[str, np.ndarray], moments: Dict[str, np.ndarray],
                        trainer: Dict[str, Any], config_digest: bytes) -> None:
        """Persist parameters, optimizer moments and trainer bookkeeping."""

    @abstractmethod
    def load_checkpoint(self, run_dir: Path, config_digest: bytes) -> Optional[Dict[str, Any]]:
        """Return {params, moments, trainer} or None when no checkpoint exists."""

    @abstractmethod
    def has_checkpoint(self, run_dir: Path) -> bool:
        """Whether a complete checkpoint is present."""


class RecordRepository(ABC):
    """Abstract interface for training record streams."""

    @abstractmethod
    def append_records(self, path: Path, records: Iterable[Dict[str, Any]]) -> None:
        """Append records, one per line."""

    @abstractmethod
    def read_records(self, path: Path) -> List[Dict[str, Any]]:
        """Read all records in order."""

    @abstractmethod
    def truncate_records(self, path: Path, keep_steps: int) -> None:
        """Drop records with step >= keep_steps (used on resume)."""


class ManifestRepository(ABC):
    """Abstract interface for run manifests."""

    @abstractmethod
    def save_manifest(self, out_dir: Path, data: Dict[str, Any]) -> Path:
        """Write the manifest next to the run's outputs."""
