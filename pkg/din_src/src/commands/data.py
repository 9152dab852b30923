import argparse
from pathlib import Path

from commands.base import Argument, Command, recorded_run
from imaging import MANIFEST_NAME, degrade_dataset


def get_degrade_command() -> Command:
    return Command(
        name="degrade",
        description="Write bicubic LR images (1/scale) for every HR PNG in a directory.",
        arguments=[
            Argument(("--hr-dir",), {"type": Path, "required": True, "help": "Directory of HR PNG images."}),
            Argument(("--scale",), {"type": int, "required": True, "choices": [2, 3, 4]}),
            Argument(("--out",), {"type": Path, "required": True, "help": "Output directory for LR images."}),
        ],
    )


def handle_degrade(args: argparse.Namespace) -> int:
    inputs = {"hr_dir": args.hr_dir}
    with recorded_run("degrade", args.out, {"scale": args.scale}, None, inputs) as manifest:
        pairs = degrade_dataset(args.hr_dir, args.scale, args.out)
        manifest.outputs = {"lr_dir": args.out, "pairs": args.out / MANIFEST_NAME}
        manifest.extra["images"] = len(pairs)
    print(f"Degraded {len(pairs)} image(s) by x{args.scale} into {args.out}")
    return 0
