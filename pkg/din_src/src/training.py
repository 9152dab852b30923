"""L1 training with Adam, patch sampling and the fusion comparison harness."""
import logging
import math
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

import repos
from din_blocks import DINParams, ModelConfig, build_din_params, din_forward
from imaging import ImagePlane, degrade, list_images, modcrop, psnr_y, read_manifest, read_png
from tensor_engine import ParameterStore, Tape, Tensor, apply_op
from utils import ConfigError, DataError, NumericalError, config_hash, err_field, err_invalid, err_mismatch

logger = logging.getLogger(__name__)

DTYPES = {"float32": np.float32, "float64": np.float64}
FUSION_BENCH_MODES = ("sum", "concat", "asyca")


@dataclass(frozen=True)
class TrainConfig:
    """Optimisation hyperparameters. Defaults are the published settings."""

    batch_size: int = 8
    lr_patch: int = 50
    lr0: float = 1e-4
    lr_halve_every: int = 200
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8
    max_epochs: int = 1000
    max_steps: int = 0  # 0: max_epochs * steps_per_epoch
    steps_per_epoch: int = 0  # 0: ceil(images / batch_size)
    seed: int = 0
    augment: bool = True
    checkpoint_every: int = 1
    val_every: int = 1
    dtype: str = "float32"

    def __post_init__(self):
        for name in ("batch_size", "lr_patch", "lr_halve_every", "max_epochs", "checkpoint_every", "val_every"):
            value = getattr(self, name)
            if not isinstance(value, int) or isinstance(value, bool) or value < 1:
                raise ConfigError(err_field(f"train.{name}", f"must be a positive integer, got {value!r}."))
        for name in ("max_steps", "steps_per_epoch", "seed"):
            value = getattr(self, name)
            if not isinstance(value, int) or isinstance(value, bool) or value < 0:
                raise ConfigError(err_field(f"train.{name}", f"must be a non-negative integer, got {value!r}."))
        for name in ("lr0", "eps"):
            value = getattr(self, name)
            if not isinstance(value, (int, float)) or isinstance(value, bool) or value <= 0:
                raise ConfigError(err_field(f"train.{name}", f"must be a positive number, got {value!r}."))
        for name in ("beta1", "beta2"):
            value = getattr(self, name)
            if not isinstance(value, (int, float)) or not 0 <= value < 1:
                raise ConfigError(err_field(f"train.{name}", f"must lie in [0, 1), got {value!r}."))
        if not isinstance(self.augment, bool):
            raise ConfigError(err_field("train.augment", "must be true or false."))
        if self.dtype not in DTYPES:
            raise ConfigError(err_field("train.dtype", f"must be one of {tuple(DTYPES)}, got {self.dtype!r}."))

    @property
    def np_dtype(self):
        return DTYPES[self.dtype]

    def snapshot(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(err_field(f"train.{unknown[0]}", "unknown key.", f"Known keys: {', '.join(sorted(known))}."))
        return cls(**data)


# --- Loss and optimiser ---

def l1_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean absolute error over every element; subgradient 0 at zero residual."""
    if pred.shape != target.shape:
        raise ValueError(err_mismatch("l1_loss operand shape", pred.shape, target.shape))
    residual = pred.data - target.data
    count = residual.size

    def rule(g):
        local = np.sign(residual) * (g / count)
        return local, -local

    return apply_op("l1_loss", (pred, target), np.abs(residual).mean().reshape(1, 1, 1, 1), rule)


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def for_params(cls, params: ParameterStore) -> "AdamState":
        return cls(
            {name: np.zeros_like(t.data) for name, t in params.items()},
            {name: np.zeros_like(t.data) for name, t in params.items()},
        )

    def moments(self) -> dict[str, np.ndarray]:
        out = {f"m/{name}": values for name, values in self.m.items()}
        out.update({f"v/{name}": values for name, values in self.v.items()})
        return out

    @classmethod
    def from_moments(cls, moments: Mapping[str, np.ndarray], t: int) -> "AdamState":
        m = {k[2:]: v.copy() for k, v in moments.items() if k.startswith("m/")}
        v = {k[2:]: val.copy() for k, val in moments.items() if k.startswith("v/")}
        return cls(m, v, t)


def adam_step(params: ParameterStore, grads: Mapping[str, np.ndarray | None], state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.99, eps: float = 1e-8) -> None:
    """Bias-corrected Adam update, in place."""
    missing = [name for name in params if grads.get(name) is None]
    if missing:
        raise ValueError(err_invalid(f"Missing gradient for {len(missing)} parameter(s), e.g. '{missing[0]}'."))
    state.t += 1
    bc1 = 1.0 - beta1 ** state.t
    bc2 = 1.0 - beta2 ** state.t
    step_size = lr / bc1

    for name, tensor in params.items():
        g = grads[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(tensor.data)
            state.v[name] = np.zeros_like(tensor.data)
        m, v = state.m[name], state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        denom = np.sqrt(v * (1.0 / bc2)) + eps
        tensor.data -= step_size * m / denom


def lr_schedule(epoch: int, config: TrainConfig) -> float:
    """Step decay: lr0 halved every `lr_halve_every` epochs."""
    if epoch < 0:
        raise ValueError(err_invalid(f"Epoch must be non-negative, got {epoch}."))
    return config.lr0 * 0.5 ** (epoch // config.lr_halve_every)


# --- Data ---

@dataclass(frozen=True)
class TrainingPair:
    name: str
    hr: ImagePlane
    lr: ImagePlane


def make_pair(name: str, hr: ImagePlane, scale: int, lr: ImagePlane | None = None) -> TrainingPair:
    hr = modcrop(hr, scale)
    if lr is None:
        lr = degrade(hr, scale)
    if (lr.height * scale, lr.width * scale) != (hr.height, hr.width):
        raise DataError(err_mismatch(f"LR size of '{name}' times {scale}", (hr.height, hr.width), (lr.height * scale, lr.width * scale)))
    return TrainingPair(name, hr.with_range(1.0), lr.with_range(1.0))


def load_training_pairs(scale: int, hr_dir: Path | None = None, manifest: Path | None = None) -> list[TrainingPair]:
    """Pairs from an HR directory (LR made in memory) or a pairs.txt manifest."""
    if manifest is not None:
        return [make_pair(p.name, read_png(p.hr_path), scale, read_png(p.lr_path)) for p in read_manifest(manifest)]
    if hr_dir is not None:
        return [make_pair(path.stem, read_png(path), scale) for path in list_images(hr_dir)]
    raise DataError(err_invalid("No training data given.", "Pass --hr-dir or --pairs."))


def augment_array(values: np.ndarray, k: int, flip: bool) -> np.ndarray:
    """(h, w, c) array: optional horizontal flip, then k quarter turns."""
    out = values[:, ::-1] if flip else values
    return np.ascontiguousarray(np.rot90(out, k, axes=(0, 1)))


def sample_patch_pair(hr: ImagePlane, scale: int, patch: int, rng: np.random.Generator, augment: bool = True,
                      lr: ImagePlane | None = None, dtype=np.float32) -> tuple[Tensor, Tensor]:
    """Random aligned (p x p LR, rp x rp HR) crop, optionally with a shared dihedral transform."""
    if lr is None:
        lr = degrade(modcrop(hr, scale), scale)
    if lr.height < patch or lr.width < patch:
        raise DataError(err_invalid(f"LR image {lr.height}x{lr.width} is smaller than patch {patch}."))
    top = int(rng.integers(0, lr.height - patch + 1))
    left = int(rng.integers(0, lr.width - patch + 1))
    lr_values = lr.with_range(1.0).values[top:top + patch, left:left + patch]
    hp = patch * scale
    hr_values = hr.with_range(1.0).values[top * scale:top * scale + hp, left * scale:left * scale + hp]
    if augment:
        k, flip = int(rng.integers(0, 4)), bool(rng.integers(0, 2))
        lr_values, hr_values = augment_array(lr_values, k, flip), augment_array(hr_values, k, flip)
    return (
        Tensor(lr_values.transpose(2, 0, 1)[None].astype(dtype)),
        Tensor(hr_values.transpose(2, 0, 1)[None].astype(dtype)),
    )


def sample_batch(dataset: list[TrainingPair], config: TrainConfig, scale: int, rng: np.random.Generator) -> tuple[Tensor, Tensor]:
    lrs, hrs = [], []
    for _ in range(config.batch_size):
        pair = dataset[int(rng.integers(0, len(dataset)))]
        lr, hr = sample_patch_pair(pair.hr, scale, config.lr_patch, rng, config.augment, pair.lr, config.np_dtype)
        lrs.append(lr.data)
        hrs.append(hr.data)
    return Tensor(np.concatenate(lrs, axis=0)), Tensor(np.concatenate(hrs, axis=0))


def super_resolve(params: DINParams, lr: ImagePlane, dtype=np.float32) -> ImagePlane:
    return ImagePlane.from_tensor(din_forward(lr.to_tensor(dtype), params))


def evaluate_psnr(params: DINParams, pairs: list[TrainingPair], dtype=np.float32) -> float:
    """Mean Y-channel PSNR over full images, border crop = scale."""
    scale = params.config.scale
    values = [psnr_y(super_resolve(params, p.lr, dtype), p.hr, crop=scale) for p in pairs]
    return math.inf if any(math.isinf(v) for v in values) else sum(values) / len(values)


# --- Loop ---

@dataclass
class TrainRecord:
    step: int
    epoch: int
    lr: float
    loss: float
    val_psnr: float | None = None

    def to_dict(self) -> dict:
        return {"step": self.step, "epoch": self.epoch, "lr": self.lr, "loss": self.loss, "val_psnr": self.val_psnr}


@dataclass
class TrainResult:
    params: DINParams
    state: AdamState
    records: list[TrainRecord]
    steps: int


# Run length only; a resumed run may extend it
BUDGET_FIELDS = ("max_epochs", "max_steps")


def run_digest(model_cfg: ModelConfig, train_cfg: TrainConfig) -> bytes:
    """Digest a checkpoint must match to be resumed. Budget fields are left out."""
    train = {k: v for k, v in train_cfg.snapshot().items() if k not in BUDGET_FIELDS}
    return config_hash({"model": model_cfg.snapshot(), "train": train})


def _trainer_state(step: int, epoch: int, state: AdamState, rng: np.random.Generator) -> dict:
    return {"step": step, "epoch": epoch, "adam_t": state.t, "rng_state": rng.bit_generator.state}


def train_loop(
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    dataset: list[TrainingPair],
    out_dir: Path | None = None,
    resume: bool = False,
    validation: list[TrainingPair] | None = None,
    on_record: Callable[[TrainRecord], None] | None = None,
) -> TrainResult:
    """Train from scratch (or resume from out_dir) and return the final state.

    Records are appended to out_dir/records.ndjson; a checkpoint is written
    every `checkpoint_every` epochs and at the end.
    """
    if not dataset:
        raise DataError(err_invalid("Training dataset is empty."))
    steps_per_epoch = train_cfg.steps_per_epoch or math.ceil(len(dataset) / train_cfg.batch_size)
    total_steps = train_cfg.max_steps or train_cfg.max_epochs * steps_per_epoch
    digest = run_digest(model_cfg, train_cfg)
    dtype = train_cfg.np_dtype

    params = build_din_params(model_cfg, train_cfg.seed, dtype)
    state = AdamState.for_params(params.store)
    rng = np.random.default_rng(train_cfg.seed)
    step = 0
    records_path = Path(out_dir) / repos.RECORDS_FILE if out_dir else None

    if out_dir and resume:
        saved = repos.checkpoint_repo.load_checkpoint(out_dir, digest)
        if saved is not None:
            params.store.load_arrays(saved["params"])
            trainer = saved["trainer"]
            state = AdamState.from_moments(saved["moments"], trainer["adam_t"])
            rng.bit_generator.state = trainer["rng_state"]
            step = trainer["step"]
            repos.record_repo.truncate_records(records_path, step)
            logger.info("Resumed from %s at step %d", out_dir, step)
    elif records_path is not None and records_path.exists():
        records_path.unlink()

    records: list[TrainRecord] = []
    while step < total_steps:
        epoch = step // steps_per_epoch
        lr = lr_schedule(epoch, train_cfg)
        lr_batch, hr_batch = sample_batch(dataset, train_cfg, model_cfg.scale, rng)

        params.store.zero_grad()
        try:
            with Tape() as tape:
                loss = l1_loss(din_forward(lr_batch, params), hr_batch)
                tape.backward(loss)
        except NumericalError as exc:
            raise NumericalError(f"Training diverged at step {step} (epoch {epoch}): {exc}") from exc
        adam_step(params.store, params.store.grads(), state, lr, train_cfg.beta1, train_cfg.beta2, train_cfg.eps)
        tape.clear()
        step += 1

        epoch_done = step % steps_per_epoch == 0
        val_psnr = None
        if validation and epoch_done and (epoch + 1) % train_cfg.val_every == 0:
            val_psnr = evaluate_psnr(params, validation, dtype)
        record = TrainRecord(step - 1, epoch, lr, loss.item(), val_psnr)
        records.append(record)
        logger.info("step %d epoch %d lr %.3g loss %.6f%s", record.step, epoch, lr, record.loss,
                    f" val_psnr {val_psnr:.3f}" if val_psnr is not None else "")
        if records_path is not None:
            repos.record_repo.append_records(records_path, [record.to_dict()])
        if on_record is not None:
            on_record(record)

        if out_dir and ((epoch_done and (epoch + 1) % train_cfg.checkpoint_every == 0) or step == total_steps):
            repos.checkpoint_repo.save_checkpoint(
                out_dir, params.store.arrays(), state.moments(), _trainer_state(step, epoch, state, rng), digest
            )

    if out_dir:
        repos.weight_repo.save_weights(Path(out_dir) / repos.WEIGHTS_FILE, params.store.arrays(), model_cfg.digest())
        repos.save_model_config(out_dir, model_cfg)
    return TrainResult(params, state, records, step)


# --- Harnesses ---

def fusion_comparison(
    configs: Mapping[str, ModelConfig],
    train_cfg: TrainConfig,
    dataset: list[TrainingPair],
    out_dir: Path | None = None,
    zero_init_attention: bool = True,
) -> dict[str, list[TrainRecord]]:
    """Seed-matched runs that differ only in the fusion applied at interleaved nodes."""
    if not configs:
        raise ConfigError(err_invalid("fusion_comparison needs at least one config."))
    normalised = {mode: replace(cfg, fusion_mode="asyca", use_asyca=True) for mode, cfg in configs.items()}
    reference = next(iter(normalised.values()))
    for mode, cfg in configs.items():
        if cfg.fusion_mode != mode:
            raise ConfigError(err_mismatch(f"Fusion mode of run '{mode}'", mode, cfg.fusion_mode))
        if normalised[mode] != reference:
            raise ConfigError(err_invalid(f"Config for '{mode}' differs from the others beyond fusion_mode."))

    results = {}
    for mode, cfg in configs.items():
        if mode == "asyca" and zero_init_attention:
            cfg = replace(cfg, attn_zero_init=True)
        run_dir = Path(out_dir) / mode if out_dir else None
        logger.info("Fusion run '%s' -> %s", mode, run_dir or "memory")
        results[mode] = train_loop(cfg, train_cfg, dataset, run_dir).records
    return results


def fusion_bench_configs(base: ModelConfig, modes=FUSION_BENCH_MODES) -> dict[str, ModelConfig]:
    return {mode: replace(base, fusion_mode=mode, use_asyca=mode == "asyca") for mode in modes}
