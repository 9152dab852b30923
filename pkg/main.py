"""Command-line entry point for the DIN super-resolution kit."""
import argparse
import logging
import sys
from pathlib import Path

from config import Config


# Add the module directory to Python path
din_src_path = Path(__file__).parent / Config.DIN_SRC_PATH / "src"
sys.path.insert(0, str(din_src_path))

from commands import get_all_commands, run_command  # noqa: E402
from utils import TOOL_VERSION, DinError, ConfigError  # noqa: E402

logger = logging.getLogger("din")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_IO = 3


class _Parser(argparse.ArgumentParser):
    """Usage errors become ConfigError so they share exit code 1 with config errors."""

    def error(self, message):
        raise ConfigError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="din", description="Dense interleaved network for single-image super-resolution.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {TOOL_VERSION}")
    subparsers = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for command in get_all_commands():
        command.register(subparsers)
    return parser


def configure_logging(level: str = Config.LOG_LEVEL) -> None:
    logging.basicConfig(
        level=level,
        format="[din] %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
        force=True,
    )


def main(argv: list[str] | None = None) -> int:
    configure_logging()
    try:
        args = build_parser().parse_args(argv)
        return run_command(args.command, args)
    except DinError as e:
        logger.error("%s", e)
        return e.exit_code
    except OSError as e:
        logger.error("I/O error: %s", e)
        return EXIT_IO
    except ValueError as e:
        logger.error("%s", e)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
