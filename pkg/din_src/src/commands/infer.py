import argparse
import logging
from pathlib import Path

import numpy as np

import repos
from commands.base import Argument, Command, recorded_run
from din_blocks import ModelConfig, build_din_params, din_forward, self_ensemble_infer
from imaging import (
    BICUBIC_REFERENCE,
    ImagePlane,
    evaluate_dirs,
    format_report,
    list_images,
    read_png,
    sr_stem,
    upscale_bicubic,
    write_png,
)
from run_config import read_config_file
from utils import ConfigError, DataError, err_mismatch, err_not_found, err_required, format_table

logger = logging.getLogger(__name__)

REPORT_FILE = "metrics.tsv"


def _input_images(path: Path) -> list[Path]:
    if path.is_dir():
        return list_images(path)
    if not path.is_file():
        raise DataError(err_not_found("Input image", str(path)))
    return [path]


# --- infer ---

def get_infer_command() -> Command:
    return Command(
        name="infer",
        description="Super-resolve LR PNG images with trained weights (or plain bicubic).",
        arguments=[
            Argument(("--input",), {"type": Path, "required": True, "help": "LR PNG file or directory."}),
            Argument(("--scale",), {"type": int, "required": True, "choices": [2, 3, 4]}),
            Argument(("--out",), {"type": Path, "required": True, "help": "Output directory for SR images."}),
            Argument(("--weights",), {"type": Path, "help": "weights.dinw from a training run."}),
            Argument(("--config",), {"type": Path, "help": "Config file whose model section matches the weights."}),
            Argument(("--ensemble",), {"action": "store_true", "help": "Average over the 8 flips/rotations."}),
            Argument(("--bicubic",), {"action": "store_true", "help": "Bicubic upscaling; no weights needed."}),
        ],
    )


def _load_model(args: argparse.Namespace):
    if args.config:
        model_cfg = ModelConfig.from_dict(read_config_file(args.config).get("model", {}))
    else:
        model_cfg = repos.load_model_config(args.weights)
    if model_cfg.scale != args.scale:
        raise ConfigError(err_mismatch("Model scale", model_cfg.scale, args.scale))
    arrays = repos.weight_repo.load_weights(args.weights, model_cfg.digest())
    dtype = next(iter(arrays.values())).dtype if arrays else np.float32
    params = build_din_params(model_cfg, dtype=dtype, initialize=False)
    params.store.load_arrays(arrays)
    return model_cfg, params, dtype


def handle_infer(args: argparse.Namespace) -> int:
    if not args.bicubic and args.weights is None:
        raise ConfigError(err_required("--weights") + " Or pass --bicubic.")
    inputs = {"input": args.input, "weights": args.weights, "config": args.config}
    snapshot = {"scale": args.scale, "ensemble": args.ensemble, "bicubic": args.bicubic}
    with recorded_run("infer", args.out, snapshot, None, inputs) as manifest:
        params = dtype = None
        if not args.bicubic:
            model_cfg, params, dtype = _load_model(args)
            snapshot["model"] = model_cfg.snapshot()
        written = []
        for path in _input_images(args.input):
            lr = read_png(path)
            if params is None:
                sr = upscale_bicubic(lr, args.scale)
            else:
                x = lr.to_tensor(dtype)
                y = self_ensemble_infer(x, params) if args.ensemble else din_forward(x, params)
                sr = ImagePlane.from_tensor(y)
            written.append(write_png(sr, args.out / f"{sr_stem(path, args.scale)}.png"))
            logger.info("%s -> %s (%dx%d)", path.name, written[-1].name, sr.width, sr.height)
        manifest.outputs = {"sr_dir": args.out}
        manifest.extra["images"] = len(written)
    print(f"Wrote {len(written)} SR image(s) to {args.out}")
    return 0


# --- eval ---

def get_eval_command() -> Command:
    return Command(
        name="eval",
        description="Y-channel PSNR/SSIM of SR images against HR images (border crop = scale).",
        arguments=[
            Argument(("--sr-dir",), {"type": Path, "required": True}),
            Argument(("--hr-dir",), {"type": Path, "required": True}),
            Argument(("--scale",), {"type": int, "required": True, "choices": [2, 3, 4]}),
            Argument(("--dataset",), {"default": "custom", "help": "Dataset name for the report."}),
            Argument(("--reference",), {"action": "store_true",
                                        "help": "Add the published bicubic value for --dataset and the delta."}),
            Argument(("--out",), {"type": Path, "help": "Report directory (default: --sr-dir)."}),
        ],
    )


def handle_eval(args: argparse.Namespace) -> int:
    out_dir = args.out or args.sr_dir
    reference = None
    if args.reference:
        reference = BICUBIC_REFERENCE.get((args.dataset, args.scale))
        if reference is None:
            known = sorted({name for name, _ in BICUBIC_REFERENCE})
            raise ConfigError(f"No reference values for {args.dataset} x{args.scale}. Known datasets: {', '.join(known)}.")
    inputs = {"sr_dir": args.sr_dir, "hr_dir": args.hr_dir}
    with recorded_run("eval", out_dir, {"scale": args.scale, "dataset": args.dataset, "crop": args.scale}, None, inputs) as manifest:
        rows = evaluate_dirs(args.sr_dir, args.hr_dir, args.scale)
        report = format_report(rows, args.dataset, args.scale, reference)
        report_path = Path(out_dir) / REPORT_FILE
        report_path.write_text(report, encoding="utf-8")
        manifest.outputs = {"report": report_path}
    table = [line.split("\t") for line in report.splitlines()[1:]]
    print(format_table(table[0], table[1:]))
    return 0
