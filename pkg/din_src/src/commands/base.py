"""Command definitions and the run manifest every command writes."""
import argparse
import logging
import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Iterator

from repos import manifest_repo
from run_config import RunConfig, list_profiles, resolve_run_config
from utils import TOOL_VERSION

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Argument:
    flags: tuple[str, ...]
    options: dict = field(default_factory=dict)


@dataclass(frozen=True)
class Command:
    name: str
    description: str
    arguments: list[Argument] = field(default_factory=list)

    def register(self, subparsers) -> argparse.ArgumentParser:
        parser = subparsers.add_parser(self.name, help=self.description, description=self.description)
        for arg in self.arguments:
            parser.add_argument(*arg.flags, **arg.options)
        return parser


def config_arguments(default_profile: str | None = "desk") -> list[Argument]:
    """--profile / --config / --set, shared by every command that builds a model."""
    return [
        Argument(("--profile",), {"default": default_profile, "choices": list_profiles() or None,
                                  "help": f"Shipped config profile (default: {default_profile})."}),
        Argument(("--config",), {"type": Path, "help": "JSON config file with 'model' and/or 'train' sections."}),
        Argument(("--set",), {"dest": "overrides", "action": "append", "default": [], "metavar": "SECTION.KEY=VALUE",
                              "help": "Override one config field; repeatable."}),
    ]


def resolve_from_args(args: argparse.Namespace) -> RunConfig:
    return resolve_run_config(args.profile, args.config, args.overrides)


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int | None
    inputs: dict[str, str]
    outputs: dict[str, str] = field(default_factory=dict)
    tool_version: str = TOOL_VERSION
    started: str = ""
    finished: str = ""
    wall_seconds: float = 0.0
    status: str = "running"
    extra: dict[str, Any] = field(default_factory=dict)


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


@contextmanager
def recorded_run(command: str, out_dir: Path, config: dict, seed: int | None, inputs: dict) -> Iterator[RunManifest]:
    """Yield a manifest to fill in; it is written to out_dir on exit, also on failure."""
    manifest = RunManifest(command, config, seed, {k: str(v) for k, v in inputs.items() if v is not None}, started=_now())
    start = time.perf_counter()
    logger.info("%s: writing to %s", command, out_dir)
    try:
        yield manifest
        manifest.status = "ok"
    except BaseException as exc:
        manifest.status = f"failed: {type(exc).__name__}"
        raise
    finally:
        manifest.finished = _now()
        manifest.wall_seconds = round(time.perf_counter() - start, 3)
        manifest.outputs = {k: str(v) for k, v in manifest.outputs.items()}
        path = manifest_repo.save_manifest(out_dir, asdict(manifest))
        logger.info("%s: %s (manifest %s)", command, manifest.status, path)
