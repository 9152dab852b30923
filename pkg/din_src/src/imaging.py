"""Image I/O, bicubic degradation and the Y-channel PSNR/SSIM protocol."""
import logging
import math
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError
from scipy.signal import convolve2d

from tensor_engine import Tensor
from utils import DataError, err_invalid, err_mismatch, err_not_found

logger = logging.getLogger(__name__)

MODEL_RANGE = 1.0
METRIC_RANGE = 255.0
COLORSPACES = ("RGB", "YCbCr", "Y")

IMAGE_SUFFIXES = (".png",)
MANIFEST_NAME = "pairs.txt"

# Bicubic baseline PSNR / SSIM on the Y channel, keyed by (dataset, scale).
BICUBIC_REFERENCE = {
    ("Set5", 2): (33.66, 0.9299), ("Set5", 3): (30.39, 0.8682), ("Set5", 4): (28.42, 0.8104),
    ("Set14", 2): (30.24, 0.8688), ("Set14", 3): (27.55, 0.7742), ("Set14", 4): (26.00, 0.7027),
    ("B100", 2): (29.56, 0.8431), ("B100", 3): (27.21, 0.7385), ("B100", 4): (25.96, 0.6675),
    ("Urban100", 2): (26.88, 0.8403), ("Urban100", 3): (24.46, 0.7349), ("Urban100", 4): (23.14, 0.6577),
    ("Manga109", 2): (30.80, 0.9339), ("Manga109", 3): (26.95, 0.8556), ("Manga109", 4): (24.89, 0.7866),
}


@dataclass(frozen=True)
class ImagePlane:
    """Pixel values (h, w, channels) with an explicit range and colorspace tag."""

    values: np.ndarray
    value_range: float = METRIC_RANGE
    colorspace: str = "RGB"

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim == 2:
            values = values[:, :, None]
        if values.ndim != 3 or values.shape[2] not in (1, 3):
            raise ValueError(err_invalid(f"Image values must be (h, w, 1|3), got {values.shape}."))
        if self.value_range not in (MODEL_RANGE, METRIC_RANGE):
            raise ValueError(err_invalid(f"Unknown value range {self.value_range}."))
        if self.colorspace not in COLORSPACES:
            raise ValueError(err_invalid(f"Unknown colorspace '{self.colorspace}'."))
        expected_channels = 1 if self.colorspace == "Y" else 3
        if values.shape[2] != expected_channels:
            raise ValueError(err_mismatch(f"{self.colorspace} channel count", expected_channels, values.shape[2]))
        object.__setattr__(self, "values", values)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def channels(self) -> int:
        return self.values.shape[2]

    def with_range(self, value_range: float) -> "ImagePlane":
        if value_range == self.value_range:
            return self
        return ImagePlane(self.values * (value_range / self.value_range), value_range, self.colorspace)

    def clipped(self) -> "ImagePlane":
        return ImagePlane(np.clip(self.values, 0.0, self.value_range), self.value_range, self.colorspace)

    def crop(self, top: int, left: int, height: int, width: int) -> "ImagePlane":
        return ImagePlane(self.values[top:top + height, left:left + width], self.value_range, self.colorspace)

    def to_tensor(self, dtype=np.float32) -> Tensor:
        """(1, c, h, w) tensor in model range."""
        values = self.with_range(MODEL_RANGE).values
        return Tensor(values.transpose(2, 0, 1)[None].astype(dtype))

    @classmethod
    def from_tensor(cls, t: Tensor, index: int = 0, colorspace: str = "RGB") -> "ImagePlane":
        """Model-range tensor sample -> clipped [0, 255] plane."""
        values = t.data[index].transpose(1, 2, 0).astype(np.float64)
        return cls(values, MODEL_RANGE, colorspace).clipped().with_range(METRIC_RANGE)


# --- PNG I/O ---

def read_png(path: Path) -> ImagePlane:
    path = Path(path)
    if not path.is_file():
        raise DataError(err_not_found("Image", str(path)))
    try:
        with Image.open(path) as img:
            data = np.asarray(img.convert("RGB"), dtype=np.float64)
    except (UnidentifiedImageError, OSError) as exc:
        raise DataError(err_invalid(f"Cannot read image '{path}': {exc}")) from exc
    return ImagePlane(data, METRIC_RANGE, "RGB")


def to_uint8(img: ImagePlane) -> np.ndarray:
    values = img.with_range(METRIC_RANGE).values
    return np.clip(np.round(values), 0, 255).astype(np.uint8)


def write_png(img: ImagePlane, path: Path) -> Path:
    if img.colorspace == "YCbCr":
        raise ValueError(err_invalid("YCbCr planes cannot be written as PNG.", "Convert to RGB first."))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pixels = to_uint8(img)
    if img.colorspace == "Y":
        Image.fromarray(pixels[:, :, 0]).save(path, format="PNG")
    else:
        Image.fromarray(pixels).save(path, format="PNG")
    return path


def list_images(directory: Path) -> list[Path]:
    directory = Path(directory)
    if not directory.is_dir():
        raise DataError(err_not_found("Image directory", str(directory)))
    files = sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not files:
        raise DataError(err_invalid(f"Image directory '{directory}' contains no PNG files."))
    return files


# --- Bicubic resampling ---

def cubic(x: np.ndarray, a: float = -0.5) -> np.ndarray:
    """Keys cubic convolution kernel."""
    ax = np.abs(x)
    ax2, ax3 = ax * ax, ax * ax * ax
    near = (a + 2) * ax3 - (a + 3) * ax2 + 1
    far = a * ax3 - 5 * a * ax2 + 8 * a * ax - 4 * a
    return np.where(ax <= 1, near, np.where(ax <= 2, far, 0.0))


def resize_weights(in_len: int, out_len: int, factor: float, antialias: bool = True) -> np.ndarray:
    """(out_len, in_len) resampling matrix with unit row sums.

    Sample positions follow the pixel-centre mapping u = x/f + (1 - 1/f)/2.
    On downscale the kernel is stretched by 1/f; out-of-range taps are
    clamped to the border pixel.
    """
    if factor < 1 and antialias:
        width = 4.0 / factor

        def kernel(t):
            return factor * cubic(factor * t)
    else:
        width = 4.0
        kernel = cubic

    x = np.arange(1, out_len + 1, dtype=np.float64)
    u = x / factor + 0.5 * (1 - 1 / factor)
    left = np.floor(u - width / 2)
    taps = int(math.ceil(width)) + 2
    indices = left[:, None] + np.arange(taps)[None, :]
    weights = kernel(u[:, None] - indices)
    weights /= weights.sum(axis=1, keepdims=True)
    columns = np.clip(indices, 1, in_len).astype(np.int64) - 1

    matrix = np.zeros((out_len, in_len), dtype=np.float64)
    rows = np.repeat(np.arange(out_len), taps)
    np.add.at(matrix, (rows, columns.reshape(-1)), weights.reshape(-1))
    return matrix


def output_size(length: int, factor: Fraction) -> int:
    return math.ceil(Fraction(length) * factor)


def bicubic_resize(img: ImagePlane, factor) -> ImagePlane:
    """Separable bicubic resampling by a rational factor (rows first)."""
    factor = Fraction(factor).limit_denominator(1000) if not isinstance(factor, Fraction) else factor
    if factor <= 0:
        raise ValueError(err_invalid(f"Resize factor must be positive, got {factor}."))
    out_h, out_w = output_size(img.height, factor), output_size(img.width, factor)
    if out_h < 1 or out_w < 1:
        raise ValueError(err_invalid(f"Resize of {img.height}x{img.width} by {factor} is degenerate."))
    if factor == 1:
        return ImagePlane(img.values.copy(), img.value_range, img.colorspace)
    f = float(factor)
    rows = resize_weights(img.height, out_h, f)
    cols = resize_weights(img.width, out_w, f)
    values = np.einsum("oh,hwc->owc", rows, img.values)
    values = np.einsum("pw,owc->opc", cols, values)
    return ImagePlane(values, img.value_range, img.colorspace)


def modcrop(img: ImagePlane, scale: int) -> ImagePlane:
    """Crop bottom/right so both dimensions are multiples of `scale`."""
    h, w = img.height - img.height % scale, img.width - img.width % scale
    if h < 1 or w < 1:
        raise ValueError(err_invalid(f"Image {img.height}x{img.width} is smaller than scale {scale}."))
    return img.crop(0, 0, h, w)


def degrade(hr: ImagePlane, scale: int) -> ImagePlane:
    """LR counterpart of an HR image whose dims are multiples of `scale`."""
    return bicubic_resize(hr, Fraction(1, scale))


def upscale_bicubic(lr: ImagePlane, scale: int) -> ImagePlane:
    return bicubic_resize(lr, Fraction(scale)).clipped()


# --- Colour and metrics ---

def rgb_to_y(img: ImagePlane) -> ImagePlane:
    """Studio-swing BT.601 luma of an RGB image in [0, 255]."""
    if img.colorspace != "RGB":
        raise ValueError(err_mismatch("Colorspace", "RGB", img.colorspace))
    if img.value_range != METRIC_RANGE:
        raise ValueError(err_mismatch("Value range", METRIC_RANGE, img.value_range, "Call with_range(255) first."))
    r, g, b = img.values[:, :, 0], img.values[:, :, 1], img.values[:, :, 2]
    y = 16.0 + (65.738 * r + 129.057 * g + 25.064 * b) / 256.0
    return ImagePlane(y[:, :, None], METRIC_RANGE, "Y")


def _as_luma(img: ImagePlane) -> np.ndarray:
    if img.colorspace == "RGB":
        img = rgb_to_y(img.with_range(METRIC_RANGE))
    if img.colorspace != "Y" or img.value_range != METRIC_RANGE:
        raise ValueError(err_mismatch("Metric input", "Y plane in [0, 255]", f"{img.colorspace} in [0, {img.value_range:g}]"))
    return img.values[:, :, 0]


def _paired_luma(a: ImagePlane, b: ImagePlane, crop: int) -> tuple[np.ndarray, np.ndarray]:
    ya, yb = _as_luma(a), _as_luma(b)
    if ya.shape != yb.shape:
        raise ValueError(err_mismatch("Image size", ya.shape, yb.shape))
    if crop:
        if 2 * crop >= min(ya.shape):
            raise ValueError(err_invalid(f"Border crop {crop} leaves no pixels of a {ya.shape} image."))
        ya, yb = ya[crop:-crop, crop:-crop], yb[crop:-crop, crop:-crop]
    return ya, yb


def psnr_y(a: ImagePlane, b: ImagePlane, crop: int = 0) -> float:
    """PSNR on the luma plane; +inf when the images are identical."""
    ya, yb = _paired_luma(a, b, crop)
    mse = float(np.mean((ya - yb) ** 2))
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(METRIC_RANGE ** 2 / mse)


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    ax = np.arange(size, dtype=np.float64) - (size - 1) / 2
    g = np.exp(-(ax ** 2) / (2 * sigma ** 2))
    window = np.outer(g, g)
    return window / window.sum()


def ssim_y(a: ImagePlane, b: ImagePlane, crop: int = 0, window_size: int = 11, sigma: float = 1.5) -> float:
    """Single-scale SSIM on the luma plane, averaged over valid window positions."""
    ya, yb = _paired_luma(a, b, crop)
    if min(ya.shape) < window_size:
        raise ValueError(err_invalid(f"Image {ya.shape} is smaller than the {window_size}x{window_size} SSIM window."))
    c1, c2 = (0.01 * METRIC_RANGE) ** 2, (0.03 * METRIC_RANGE) ** 2
    window = gaussian_window(window_size, sigma)

    def filt(x):
        return convolve2d(x, window, mode="valid")

    mu_a, mu_b = filt(ya), filt(yb)
    var_a = filt(ya * ya) - mu_a * mu_a
    var_b = filt(yb * yb) - mu_b * mu_b
    cov = filt(ya * yb) - mu_a * mu_b
    score = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2))
    return float(score.mean())


# --- Datasets ---

@dataclass(frozen=True)
class ImagePair:
    name: str
    hr_path: Path
    lr_path: Path | None = None


def lr_name(stem: str, scale: int) -> str:
    return f"{stem}x{scale}.png"


def degrade_dataset(hr_dir: Path, scale: int, lr_dir: Path) -> list[ImagePair]:
    """Write bicubic LR images for every HR PNG plus a pairs.txt manifest."""
    hr_files = list_images(hr_dir)
    lr_dir = Path(lr_dir)
    lr_dir.mkdir(parents=True, exist_ok=True)
    pairs = []
    for hr_path in hr_files:
        hr = modcrop(read_png(hr_path), scale)
        lr_path = write_png(degrade(hr, scale), lr_dir / lr_name(hr_path.stem, scale))
        pairs.append(ImagePair(hr_path.stem, hr_path, lr_path))
        logger.debug("Degraded %s -> %s", hr_path.name, lr_path.name)
    write_manifest(pairs, lr_dir / MANIFEST_NAME)
    logger.info("Wrote %d LR images (x%d) to %s", len(pairs), scale, lr_dir)
    return pairs


def write_manifest(pairs: list[ImagePair], path: Path) -> None:
    lines = [f"{p.hr_path}\t{p.lr_path}" for p in pairs]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_manifest(path: Path) -> list[ImagePair]:
    path = Path(path)
    if not path.is_file():
        raise DataError(err_not_found("Dataset manifest", str(path)))
    pairs = []
    for number, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise DataError(err_invalid(f"{path}:{number}: expected 'hr_path<TAB>lr_path'."))
        hr_path, lr_path = (Path(p) for p in parts)
        pairs.append(ImagePair(hr_path.stem, hr_path, lr_path))
    if not pairs:
        raise DataError(err_invalid(f"Dataset manifest '{path}' lists no pairs."))
    return pairs


def sr_stem(lr_path: Path, scale: int) -> str:
    """Name of the HR image an LR file was derived from."""
    stem = Path(lr_path).stem
    suffix = f"x{scale}"
    return stem[: -len(suffix)] if stem.endswith(suffix) and len(stem) > len(suffix) else stem


# --- Evaluation report ---

@dataclass
class MetricRow:
    name: str
    psnr: float
    ssim: float


def evaluate_dirs(sr_dir: Path, hr_dir: Path, scale: int) -> list[MetricRow]:
    """PSNR/SSIM of each SR image against the HR image with the same stem."""
    hr_files = {p.stem: p for p in list_images(hr_dir)}
    rows = []
    for sr_path in list_images(sr_dir):
        hr_path = hr_files.get(sr_path.stem)
        if hr_path is None:
            raise DataError(err_not_found("HR image for", sr_path.name, f"Looked in {hr_dir}."))
        sr = read_png(sr_path)
        hr = modcrop(read_png(hr_path), scale)
        if (hr.height, hr.width) != (sr.height, sr.width):
            raise DataError(err_mismatch(f"Size of '{sr_path.name}'", (hr.height, hr.width), (sr.height, sr.width),
                                         f"HR is cropped to a multiple of {scale} first."))
        rows.append(MetricRow(sr_path.stem, psnr_y(sr, hr, crop=scale), ssim_y(sr, hr, crop=scale)))
    return rows


def format_report(rows: list[MetricRow], dataset: str, scale: int, reference: tuple[float, float] | None = None) -> str:
    """Tab-separated metrics table with a header comment naming the crop rule."""
    header = ["dataset", "scale", "image", "psnr", "ssim"]
    if reference:
        header += ["ref_psnr", "ref_ssim", "delta_psnr"]
    lines = [f"# Y channel (BT.601), border crop = {scale} px per side", "\t".join(header)]

    def line(name, psnr, ssim):
        cells = [dataset, str(scale), name, f"{psnr:.4f}", f"{ssim:.4f}"]
        if reference:
            cells += [f"{reference[0]:.2f}", f"{reference[1]:.4f}", f"{psnr - reference[0]:+.4f}"]
        return "\t".join(cells)

    for row in rows:
        lines.append(line(row.name, row.psnr, row.ssim))
    if rows:
        lines.append(line("average", average_psnr(rows), sum(r.ssim for r in rows) / len(rows)))
    return "\n".join(lines) + "\n"


def average_psnr(rows: list[MetricRow]) -> float:
    values = [r.psnr for r in rows]
    if any(math.isinf(v) for v in values):
        return math.inf
    return sum(values) / len(values)
