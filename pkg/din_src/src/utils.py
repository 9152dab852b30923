import hashlib
import json
import os
import re
import zlib
from pathlib import Path


# Project root (where profiles/ lives)
PROJECT_ROOT = Path(__file__).parent.parent
PROFILES_DIR = Path(os.getenv("DIN_PROFILES_DIR") or PROJECT_ROOT / "profiles")
RUNS_DIR = Path(os.getenv("DIN_RUNS_DIR") or "runs")

TOOL_VERSION = "0.1.0"


def config_hash(snapshot: dict) -> bytes:
    """SHA-256 over the canonical JSON form of a config snapshot."""
    canonical = json.dumps(snapshot, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).digest()


def name_seed(seed: int, name: str) -> list[int]:
    """Seed material for a per-name generator: (seed, crc32(name))."""
    return [int(seed) & 0xFFFFFFFF, zlib.crc32(name.encode("utf-8"))]


def parse_override(text: str) -> tuple[str, str, object]:
    """Parse 'section.key=value' into (section, key, value).

    The value is decoded as JSON when possible ("3", "true", "0.5"),
    otherwise kept as a plain string ("asyca").
    """
    match = re.match(r'^\s*(\w+)\.(\w+)\s*=(.*)$', text)
    if not match:
        raise ConfigError(err_invalid(f"Override '{text}' is malformed.", "Use section.key=value."))
    section, key, raw = match.group(1), match.group(2), match.group(3).strip()
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return section, key, value


def format_table(headers: list[str], rows: list[list], sep: str = "  ") -> str:
    """Render rows as a left-aligned plain-text table."""
    cells = [[str(h) for h in headers]] + [[str(c) for c in row] for row in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(headers))]
    lines = [sep.join(c.ljust(w) for c, w in zip(row, widths)).rstrip() for row in cells]
    lines.insert(1, sep.join("-" * w for w in widths))
    return "\n".join(lines)


# --- Errors ---

class DinError(Exception):
    """Base class for failures the CLI maps to an exit code."""

    exit_code = 1


class ConfigError(DinError, ValueError):
    """Invalid configuration file, field or override."""

    exit_code = 1


class NumericalError(DinError, ArithmeticError):
    """Non-finite values or a failed gradient check."""

    exit_code = 2


class DataError(DinError, OSError):
    """Missing, unreadable or empty inputs."""

    exit_code = 3


# --- Error formatting utilities ---

def err_not_found(entity: str, name: str, hint: str | None = None) -> str:
    """Format 'not found' error. Example: "HR directory 'data/hr' not found." """
    msg = f"{entity} '{name}' not found."
    if hint:
        msg += f" {hint}"
    return msg


def err_mismatch(what: str, expected, got, hint: str | None = None) -> str:
    """Format a mismatch error. Example: "Channel count mismatch: expected 64, got 32." """
    msg = f"{what} mismatch: expected {expected}, got {got}."
    if hint:
        msg += f" {hint}"
    return msg


def err_field(field: str, problem: str, hint: str | None = None) -> str:
    """Format a config field error. Example: "Field 'model.C': must be positive." """
    msg = f"Field '{field}': {problem}"
    if hint:
        msg += f" {hint}"
    return msg


def err_required(param: str) -> str:
    """Format 'required' error. Example: "--weights is required." """
    return f"{param} is required."


def err_invalid(description: str, hint: str | None = None) -> str:
    """Format 'invalid' error. Example: "Patch size must be positive." """
    msg = description
    if hint:
        msg += f" {hint}"
    return msg
