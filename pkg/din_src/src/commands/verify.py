"""Finite-difference gradient suite and parameter accounting."""
import argparse
import json
import logging
from dataclasses import asdict
from pathlib import Path
from typing import Callable

import numpy as np

from commands.base import Argument, Command, config_arguments, recorded_run, resolve_from_args
from din_blocks import (
    PUBLISHED_PARAMS,
    ModelConfig,
    asyca_forward,
    build_din_params,
    count_parameters,
    din_forward,
    rdb_forward,
    wrdb_forward,
)
from nn_ops import (
    channel_pair_softmax,
    conv2d,
    depthwise_conv1x1,
    global_avg_pool,
    leaky_relu,
    make_conv2d,
    make_depthwise,
    pixel_shuffle,
)
from tensor_engine import (
    GradCheckReport,
    ParameterStore,
    Tape,
    Tensor,
    add,
    concat_channels,
    finite_diff_check_many,
    mean_all,
    mul,
    scale,
    split_channels,
    sub,
    sum_all,
)
from training import l1_loss
from run_config import read_config_file
from utils import RUNS_DIR, ConfigError, NumericalError, err_field, format_table, parse_override

logger = logging.getLogger(__name__)

TOLERANCE = 1e-4
EPSILON = 1e-6
# Pre-activations stay three of the widest difference steps (EPSILON * 100) clear of the ReLU kink
KINK_MARGIN = 3e-4
MAX_DRAWS = 500
REPORT_FILE = "gradcheck.json"
# Accepted relative gap between a counted total and PUBLISHED_PARAMS
PARAM_TOLERANCE = 0.10

# Tiny network the full-model check runs on.
GRADCHECK_MODEL = ModelConfig(
    branches=2, wrdbs_per_branch=2, rdbs_per_wrdb=1, convs_per_rdb=2, growth=8, base_channels=16, scale=2, attn_reduction=4,
)


def _leaf(rng: np.random.Generator, shape, low=-1.0, high=1.0) -> Tensor:
    return Tensor(rng.uniform(low, high, size=shape), requires_grad=True)


def _away_from_zero(rng: np.random.Generator, shape, margin=0.1) -> Tensor:
    """Values with |v| >= margin so kinks at zero stay outside the difference step."""
    magnitude = rng.uniform(margin, 1.0, size=shape)
    return Tensor(magnitude * rng.choice([-1.0, 1.0], size=shape), requires_grad=True)


def _weighted(out: Tensor, seed: int) -> Tensor:
    """Scalar with a non-uniform upstream gradient; same weights for a given seed."""
    weights = np.random.default_rng(1000 + seed).uniform(0.5, 1.5, size=out.shape)
    return sum_all(mul(out, Tensor(weights)))


def _l1_target(out: Tensor, rng: np.random.Generator) -> Tensor:
    """Target offset from `out` by at least 0.1 per element."""
    offset = rng.uniform(0.1, 0.5, size=out.shape) * rng.choice([-1.0, 1.0], size=out.shape)
    return Tensor(out.data + offset)


def _store_tensors(store: ParameterStore) -> dict[str, Tensor]:
    return dict(store.items())


def _case_elementwise(rng):
    a, b = _leaf(rng, (2, 3, 4, 4)), _leaf(rng, (2, 3, 4, 4))
    w = _leaf(rng, (2, 3, 1, 1))

    def f():
        mixed = sub(add(a, scale(b, 0.7)), mul(w, b))
        return _weighted(mixed, 1)

    return f, {"a": a, "b": b, "w": w}


def _case_concat_split(rng):
    a, b = _leaf(rng, (1, 2, 3, 3)), _leaf(rng, (1, 3, 3, 3))

    def f():
        left, right = split_channels(concat_channels([a, b]), [1, 4])
        return add(mean_all(mul(left, left)), sum_all(right))

    return f, {"a": a, "b": b}


def _case_conv(rng):
    store = ParameterStore()
    p = make_conv2d(store, "conv", 3, 4, 3, seed=7, dtype=np.float64)
    p.bias.data[...] = rng.uniform(-0.5, 0.5, size=p.bias.shape)
    x = _leaf(rng, (2, 3, 4, 4))
    return (lambda: _weighted(conv2d(x, p), 2)), {"x": x, **_store_tensors(store)}


def _case_depthwise(rng):
    store = ParameterStore()
    p = make_depthwise(store, "dwc", 3, dtype=np.float64)
    p.weight.data[...] = rng.uniform(0.5, 1.5, size=p.weight.shape)
    x = _leaf(rng, (2, 3, 3, 3))
    return (lambda: _weighted(depthwise_conv1x1(x, p), 3)), {"x": x, **_store_tensors(store)}


def _case_leaky_relu(rng):
    x = _away_from_zero(rng, (1, 2, 4, 4))
    return (lambda: _weighted(leaky_relu(x, 0.2), 4)), {"x": x}


def _case_pool(rng):
    x = _leaf(rng, (2, 3, 4, 5))
    return (lambda: _weighted(global_avg_pool(x), 5)), {"x": x}


def _case_shuffle(rng):
    x = _leaf(rng, (1, 8, 2, 3))
    return (lambda: _weighted(pixel_shuffle(x, 2), 6)), {"x": x}


def _case_softmax(rng):
    s = _leaf(rng, (2, 6, 1, 1), -2.0, 2.0)
    return (lambda: _weighted(channel_pair_softmax(s), 7)), {"s": s}


def _case_l1(rng):
    pred = _leaf(rng, (1, 3, 4, 4))
    target = _l1_target(pred, rng)
    return (lambda: l1_loss(pred, target)), {"pred": pred}


def _block_inputs(rng, cfg: ModelConfig):
    return _leaf(rng, (1, cfg.base_channels, 4, 4), -0.5, 0.5)


def _case_rdb(rng):
    cfg = GRADCHECK_MODEL
    params = build_din_params(cfg, seed=11, dtype=np.float64)
    rdb = params.branches[0][0].rdbs[0]
    x = _block_inputs(rng, cfg)
    tensors = {"x": x, "fusion.weight": rdb.fusion.weight, "conv1.weight": rdb.layers[0].weight}
    return (lambda: _weighted(rdb_forward(x, rdb), 8)), tensors


def _case_wrdb(rng):
    cfg = GRADCHECK_MODEL
    params = build_din_params(cfg, seed=12, dtype=np.float64)
    wrdb = params.branches[0][0]
    for link in wrdb.links.values():
        link.weight.data[...] = rng.uniform(0.5, 1.5, size=link.weight.shape)
    x = _block_inputs(rng, cfg)
    tensors = {"x": x, "head.weight": wrdb.head.weight}
    tensors.update({f"dwc{k[0]}_{k[1]}": v.weight for k, v in wrdb.links.items()})
    return (lambda: _weighted(wrdb_forward(x, wrdb), 9)), tensors


def _case_asyca(rng):
    cfg = GRADCHECK_MODEL
    params = build_din_params(cfg, seed=13, dtype=np.float64)
    att = params.fusions[(2, 1)].attention
    x1, x2 = _block_inputs(rng, cfg), _block_inputs(rng, cfg)
    tensors = {"x1": x1, "x2": x2, "integrate.weight": att.integrate.weight,
               "squeeze.weight": att.squeeze.weight, "excite.weight": att.excite.weight}
    return (lambda: _weighted(asyca_forward(x1, x2, att), 10)), tensors


OP_CASES: list[tuple[str, Callable]] = [
    ("add/sub/mul/scale", _case_elementwise),
    ("concat/split/mean/sum", _case_concat_split),
    ("conv2d", _case_conv),
    ("depthwise_conv1x1", _case_depthwise),
    ("leaky_relu", _case_leaky_relu),
    ("global_avg_pool", _case_pool),
    ("pixel_shuffle", _case_shuffle),
    ("channel_pair_softmax", _case_softmax),
    ("l1_loss", _case_l1),
    ("rdb", _case_rdb),
    ("wrdb", _case_wrdb),
    ("asyca", _case_asyca),
]


def kink_margin(f: Callable[[], Tensor]) -> float:
    """Smallest |pre-activation| reaching a (leaky) ReLU during one call of `f`."""
    with Tape() as tape:
        f()
    margins = [float(np.abs(entry.inputs[0].data).min()) for entry in tape if entry.name == "leaky_relu"]
    return min(margins, default=float("inf"))


def draw_model_inputs(cfg: ModelConfig, seed: int = 0):
    """Perturbed double-precision parameters and an LR input with every activation kink KINK_MARGIN away.

    Returns (params, x, margin). When no draw reaches the margin, the widest one is kept.
    """
    rng = np.random.default_rng(seed)
    best = None
    for draw in range(MAX_DRAWS):
        params = build_din_params(cfg, seed=seed, dtype=np.float64)
        for tensor in params.store.arrays().values():
            tensor += rng.normal(0.0, 1e-2, size=tensor.shape)
        x = Tensor(rng.uniform(0.0, 1.0, size=(1, 3, 3, 3)))
        margin = kink_margin(lambda: din_forward(x, params))
        if best is None or margin > best[2]:
            best = (params, x, margin)
        if margin >= KINK_MARGIN:
            logger.info("gradcheck inputs: kink margin %.2e after %d draw(s)", margin, draw + 1)
            break
    else:
        logger.warning("gradcheck inputs: best kink margin %.2e is below %.0e", best[2], KINK_MARGIN)
    return best


def check_model(cfg: ModelConfig, seed: int = 0, sample: int | None = None) -> GradCheckReport:
    """Full forward + L1 check over every parameter of `cfg` in double precision."""
    params, x, _ = draw_model_inputs(cfg, seed)
    rng = np.random.default_rng(seed + 1)
    target = _l1_target(din_forward(x, params), rng)
    return finite_diff_check_many(
        lambda: l1_loss(din_forward(x, params), target), dict(params.store.items()),
        EPSILON, TOLERANCE, sample=sample, seed=seed,
    )


def run_gradcheck_suite(cfg: ModelConfig = GRADCHECK_MODEL, seed: int = 0, sample: int | None = None,
                        include_model: bool = True) -> dict[str, GradCheckReport]:
    reports = {}
    for name, build in OP_CASES:
        f, tensors = build(np.random.default_rng(seed))
        reports[name] = finite_diff_check_many(f, tensors, EPSILON, TOLERANCE, seed=seed)
        logger.info("gradcheck %-22s max rel err %.3e", name, reports[name].max_rel_error)
    if include_model:
        reports["din (full model)"] = check_model(cfg, seed, sample)
        logger.info("gradcheck full model: max rel err %.3e", reports["din (full model)"].max_rel_error)
    return reports


# --- gradcheck ---

def gradcheck_model(config_path: Path | None, overrides: list[str]) -> ModelConfig:
    """The tiny network, updated by a config file's model section and model.* overrides."""
    fields = GRADCHECK_MODEL.snapshot()
    if config_path:
        fields.update(read_config_file(config_path).get("model", {}))
    for text in overrides:
        section, key, value = parse_override(text)
        if section != "model":
            raise ConfigError(err_field(f"{section}.{key}", "gradcheck only accepts model.* overrides."))
        fields[key] = value
    return ModelConfig.from_dict(fields)


def get_gradcheck_command() -> Command:
    return Command(
        name="gradcheck",
        description="Compare autograd gradients against central differences for every operator and a tiny network.",
        arguments=[
            Argument(("--config",), {"type": Path, "help": "Config file; its model section replaces the tiny default."}),
            Argument(("--set",), {"dest": "overrides", "action": "append", "default": [], "metavar": "SECTION.KEY=VALUE"}),
            Argument(("--seed",), {"type": int, "default": 0}),
            Argument(("--sample",), {"type": int, "help": "Check at most N coordinates per parameter tensor."}),
            Argument(("--out",), {"type": Path, "default": RUNS_DIR / "gradcheck", "help": "Report directory."}),
        ],
    )


def handle_gradcheck(args: argparse.Namespace) -> int:
    cfg = gradcheck_model(args.config, args.overrides)
    with recorded_run("gradcheck", args.out, {"model": cfg.snapshot()}, args.seed, {}) as manifest:
        reports = run_gradcheck_suite(cfg, args.seed, args.sample)
        report_path = Path(args.out) / REPORT_FILE
        report_path.write_text(json.dumps({name: asdict(r) for name, r in reports.items()}, indent=2))
        manifest.outputs = {"report": report_path}
        failed = [name for name, r in reports.items() if not r.passed]
        manifest.extra["failed"] = failed
    rows = [[name, r.checked, f"{r.primary_max_rel_error:.3e}", r.retried, f"{r.max_rel_error:.3e}", "ok" if r.passed else "FAIL"]
            for name, r in reports.items()]
    print(format_table(["operator", "coords", "eps_rel_err", "retried", "max_rel_err", "status"], rows))
    if failed:
        raise NumericalError(f"Gradient check failed for: {', '.join(failed)} (tolerance {TOLERANCE:g}).")
    return 0


# --- count-params ---

def get_count_params_command() -> Command:
    return Command(
        name="count-params",
        description="Count learnable scalars per module and compare with the published 19.88M.",
        arguments=config_arguments(default_profile="paper") + [
            Argument(("--out",), {"type": Path, "help": "Optional directory for a manifest."}),
        ],
    )


def handle_count_params(args: argparse.Namespace) -> int:
    run = resolve_from_args(args)
    counted = count_parameters(run.model)
    delta = counted.published_delta
    verdict = "within" if abs(delta) <= PARAM_TOLERANCE else "outside"
    print(f"total {counted.total:,} vs published {PUBLISHED_PARAMS:,}: {delta:+.2%}, "
          f"{verdict} the ±{PARAM_TOLERANCE:.0%} band")
    rows = [[name, f"{value:,}"] for name, value in counted.breakdown.items()]
    rows.append(["total", f"{counted.total:,}"])
    print(format_table(["module", "params"], rows))
    if args.out:
        with recorded_run("count-params", args.out, {"model": run.model.snapshot()}, None, {}) as manifest:
            manifest.extra = {"total": counted.total, "breakdown": counted.breakdown}
    return 0
