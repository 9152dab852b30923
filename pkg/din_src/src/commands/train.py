import argparse
import logging
from pathlib import Path

import repos
from commands.base import Argument, Command, config_arguments, recorded_run, resolve_from_args
from din_blocks import ablation_grid
from training import FUSION_BENCH_MODES, fusion_bench_configs, fusion_comparison, load_training_pairs, train_loop
from utils import format_table

logger = logging.getLogger(__name__)


def _data_arguments() -> list[Argument]:
    return [
        Argument(("--hr-dir",), {"type": Path, "help": "HR PNG directory; LR images are made in memory."}),
        Argument(("--pairs",), {"type": Path, "help": "pairs.txt manifest written by 'degrade'."}),
        Argument(("--val-hr-dir",), {"type": Path, "help": "Optional HR directory for validation PSNR."}),
        Argument(("--out",), {"type": Path, "required": True, "help": "Run directory."}),
    ]


def _load_data(args: argparse.Namespace, scale: int):
    train = load_training_pairs(scale, args.hr_dir, args.pairs)
    val = load_training_pairs(scale, args.val_hr_dir) if args.val_hr_dir else None
    return train, val


def _inputs(args: argparse.Namespace) -> dict:
    return {"hr_dir": args.hr_dir, "pairs": args.pairs, "val_hr_dir": args.val_hr_dir}


def _summary(records) -> str:
    if not records:
        return "no steps run"
    last = records[-1]
    return f"{len(records)} step(s), final loss {last.loss:.6f}"


# --- train ---

def get_train_command() -> Command:
    return Command(
        name="train",
        description="Train the network with L1 loss and Adam; resumable from the run directory.",
        arguments=config_arguments() + _data_arguments() + [
            Argument(("--resume",), {"action": "store_true", "help": "Continue from the checkpoint in --out."}),
        ],
    )


def handle_train(args: argparse.Namespace) -> int:
    run = resolve_from_args(args)
    train, val = _load_data(args, run.model.scale)
    with recorded_run("train", args.out, run.snapshot(), run.train.seed, _inputs(args)) as manifest:
        result = train_loop(run.model, run.train, train, args.out, resume=args.resume, validation=val)
        manifest.outputs = {
            "weights": args.out / repos.WEIGHTS_FILE,
            "model": args.out / repos.MODEL_FILE,
            "records": args.out / repos.RECORDS_FILE,
        }
        manifest.extra["steps"] = result.steps
    print(f"Trained {_summary(result.records)}; weights in {args.out / repos.WEIGHTS_FILE}")
    return 0


# --- ablate ---

def get_ablate_command() -> Command:
    return Command(
        name="ablate",
        description="Train the 2x2x2 grid of attention fusion / DWC / GFF switches with a shared seed.",
        arguments=config_arguments() + _data_arguments(),
    )


def handle_ablate(args: argparse.Namespace) -> int:
    run = resolve_from_args(args)
    train, val = _load_data(args, run.model.scale)
    rows = []
    for label, model_cfg in ablation_grid(run.model):
        run_dir = args.out / label
        snapshot = {"model": model_cfg.snapshot(), "train": run.train.snapshot()}
        with recorded_run("ablate", run_dir, snapshot, run.train.seed, _inputs(args)) as manifest:
            result = train_loop(model_cfg, run.train, train, run_dir, validation=val)
            manifest.outputs = {"records": run_dir / repos.RECORDS_FILE, "weights": run_dir / repos.WEIGHTS_FILE}
            manifest.extra["switches"] = {"asyca": model_cfg.use_asyca, "dwc": model_cfg.use_dwc, "gff": model_cfg.use_gff}
        last = result.records[-1] if result.records else None
        rows.append([label, int(model_cfg.use_asyca), int(model_cfg.use_dwc), int(model_cfg.use_gff),
                     f"{last.loss:.6f}" if last else "-",
                     f"{last.val_psnr:.3f}" if last and last.val_psnr is not None else "-"])
    print(format_table(["run", "asyca", "dwc", "gff", "final_loss", "val_psnr"], rows))
    return 0


# --- fusion-bench ---

def get_fusion_bench_command() -> Command:
    return Command(
        name="fusion-bench",
        description="Seed-matched trainings with sum, concat and attention fusion; one record file per mode.",
        arguments=config_arguments() + _data_arguments() + [
            Argument(("--no-zero-init",), {"action": "store_true",
                                           "help": "Keep random init for the attention excitation layer."}),
        ],
    )


def handle_fusion_bench(args: argparse.Namespace) -> int:
    run = resolve_from_args(args)
    train, _ = _load_data(args, run.model.scale)
    configs = fusion_bench_configs(run.model, FUSION_BENCH_MODES)
    zero_init = not args.no_zero_init
    with recorded_run("fusion-bench", args.out, run.snapshot(), run.train.seed, _inputs(args)) as manifest:
        results = fusion_comparison(configs, run.train, train, args.out, zero_init_attention=zero_init)
        manifest.outputs = {mode: args.out / mode / repos.RECORDS_FILE for mode in results}
        manifest.extra["runs"] = {
            mode: {"fusion_mode": mode, "attn_zero_init": zero_init and mode == "asyca", "steps": len(records)}
            for mode, records in results.items()
        }
    rows = [[mode, len(records), f"{records[0].loss:.6f}", f"{records[-1].loss:.6f}"]
            for mode, records in results.items() if records]
    print(format_table(["fusion", "steps", "first_loss", "final_loss"], rows))
    return 0
