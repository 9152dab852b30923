import argparse

from .data import get_degrade_command, handle_degrade
from .train import (
    get_train_command, handle_train,
    get_ablate_command, handle_ablate,
    get_fusion_bench_command, handle_fusion_bench,
)
from .infer import get_infer_command, handle_infer, get_eval_command, handle_eval
from .verify import get_gradcheck_command, handle_gradcheck, get_count_params_command, handle_count_params

# Single source of truth for all commands: (name, get_command_fn, handler_fn)
# Add new commands here - main.py builds its parser from this list
COMMAND_REGISTRY = [
    # Data
    ("degrade", get_degrade_command, handle_degrade),
    # Training
    ("train", get_train_command, handle_train),
    ("ablate", get_ablate_command, handle_ablate),
    ("fusion-bench", get_fusion_bench_command, handle_fusion_bench),
    # Inference and evaluation
    ("infer", get_infer_command, handle_infer),
    ("eval", get_eval_command, handle_eval),
    # Verification
    ("gradcheck", get_gradcheck_command, handle_gradcheck),
    ("count-params", get_count_params_command, handle_count_params),
]


def get_all_commands():
    """Get all command definitions."""
    return [get_command() for _, get_command, _ in COMMAND_REGISTRY]


def get_command_handlers():
    """Get mapping of command names to handlers."""
    return {name: handler for name, _, handler in COMMAND_REGISTRY}


def run_command(name: str, args: argparse.Namespace) -> int:
    """Run a command by name."""
    handlers = get_command_handlers()
    if name not in handlers:
        raise ValueError(f"Unknown command: {name}")
    return handlers[name](args)
