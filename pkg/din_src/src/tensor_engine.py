"""Dense 4-D tensors with reverse-mode automatic differentiation.

Every tensor is laid out row-major as (n, c, h, w). Operations executed while
a `Tape` is active, on inputs that require gradients, are recorded in order;
`backward` replays the tape in reverse. Outside a tape nothing is recorded,
which is how inference and finite-difference probing run.
"""
import contextvars
import itertools
import logging
import struct
from dataclasses import dataclass, field
from typing import Callable, Iterator, Mapping, Sequence

import numpy as np

from utils import NumericalError, err_invalid, err_mismatch

logger = logging.getLogger(__name__)

_ACTIVE_TAPE: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar("din_active_tape", default=None)

BackwardRule = Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tensor:
    """A (n, c, h, w) array with an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad", "tape", "tape_index")

    def __init__(self, data, requires_grad: bool = False, *, grad_buffer: bool = True):
        data = np.ascontiguousarray(data)
        if data.ndim != 4:
            raise ValueError(err_mismatch("Tensor rank", 4, data.ndim))
        if not np.issubdtype(data.dtype, np.floating):
            data = data.astype(np.float64)
        self.data = data
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(data) if (requires_grad and grad_buffer) else None
        # Set when the tensor is the output of a recorded operation.
        self.tape: Tape | None = None
        self.tape_index: int | None = None

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def n(self) -> int:
        return self.data.shape[0]

    @property
    def c(self) -> int:
        return self.data.shape[1]

    @property
    def h(self) -> int:
        return self.data.shape[2]

    @property
    def w(self) -> int:
        return self.data.shape[3]

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self.tape is None

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(err_mismatch("Scalar shape", (1, 1, 1, 1), self.shape))
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        if self.requires_grad:
            if self.grad is None:
                self.grad = np.zeros_like(self.data)
            else:
                self.grad.fill(0)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        flag = ", requires_grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"


@dataclass
class TapeEntry:
    """One recorded operation."""

    name: str
    inputs: tuple[Tensor, ...]
    input_ids: tuple[int, ...]
    output: Tensor
    output_id: int
    backward: BackwardRule


class Tape:
    """Ordered record of operations for one forward/backward pass.

    Usage::

        with Tape() as tape:
            loss = l1_loss(model(x), y)
            tape.backward(loss)
    """

    def __init__(self):
        self.entries: list[TapeEntry] = []
        self._ids: dict[int, int] = {}
        self._counter = itertools.count()
        self._tokens: list[contextvars.Token] = []

    def __enter__(self) -> "Tape":
        self._tokens.append(_ACTIVE_TAPE.set(self))
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _ACTIVE_TAPE.reset(self._tokens.pop())

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self) -> Iterator[TapeEntry]:
        return iter(self.entries)

    def tensor_id(self, tensor: Tensor) -> int:
        key = id(tensor)
        if key not in self._ids:
            self._ids[key] = next(self._counter)
        return self._ids[key]

    def record(self, name: str, inputs: tuple[Tensor, ...], output: Tensor, backward: BackwardRule) -> None:
        input_ids = tuple(self.tensor_id(t) for t in inputs)
        output.tape = self
        output.tape_index = len(self.entries)
        self.entries.append(TapeEntry(name, inputs, input_ids, output, self.tensor_id(output), backward))

    def clear(self) -> None:
        for entry in self.entries:
            entry.output.tape = None
            entry.output.tape_index = None
        self.entries.clear()
        self._ids.clear()

    def backward(self, root: Tensor) -> None:
        """Accumulate d(root)/d(t) into `t.grad` for every reachable t that requires grad."""
        if root.shape != (1, 1, 1, 1):
            raise ValueError(err_mismatch("Backward root shape", (1, 1, 1, 1), root.shape))
        index = root.tape_index
        if root.tape is not self or index is None or index >= len(self.entries) or self.entries[index].output is not root:
            raise ValueError(err_invalid("Backward root was not recorded on this tape.", "Run the forward pass inside the tape."))

        grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
        leaves: dict[int, Tensor] = {}
        for entry in reversed(self.entries[: index + 1]):
            grad = grads.pop(id(entry.output), None)
            if grad is None:
                continue
            _accumulate(entry.output, grad)
            input_grads = entry.backward(grad)
            for tensor, tensor_grad in zip(entry.inputs, input_grads):
                if tensor_grad is None or not tensor.requires_grad:
                    continue
                if tensor_grad.shape != tensor.shape:
                    raise ValueError(err_mismatch(f"Gradient shape in '{entry.name}'", tensor.shape, tensor_grad.shape))
                _check_finite(f"{entry.name} (backward)", tensor_grad)
                key = id(tensor)
                grads[key] = grads[key] + tensor_grad if key in grads else tensor_grad
                if tensor.is_leaf or tensor.tape is not self:
                    leaves[key] = tensor

        for key, tensor in leaves.items():
            if key in grads:
                _accumulate(tensor, grads.pop(key))


def _accumulate(tensor: Tensor, grad: np.ndarray) -> None:
    if tensor.grad is None:
        tensor.grad = np.array(grad, dtype=tensor.dtype, copy=True)
    else:
        tensor.grad += grad


def _check_finite(name: str, values: np.ndarray) -> None:
    if not np.all(np.isfinite(values)):
        raise NumericalError(err_invalid(f"Non-finite values produced by '{name}'."))


def active_tape() -> Tape | None:
    return _ACTIVE_TAPE.get()


def backward(root: Tensor) -> None:
    """Run reverse mode from a scalar root on the tape that produced it."""
    if root.tape is None:
        raise ValueError(err_invalid("Backward root was not recorded on any tape.", "Run the forward pass inside a Tape."))
    root.tape.backward(root)


def apply_op(name: str, inputs: Sequence[Tensor], data: np.ndarray, backward_rule: BackwardRule) -> Tensor:
    """Wrap a computed array as a Tensor and record it when gradients are needed."""
    _check_finite(name, data)
    tape = _ACTIVE_TAPE.get()
    needs_grad = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs_grad, grad_buffer=False)
    if needs_grad:
        tape.record(name, tuple(inputs), out, backward_rule)
    return out


# --- Construction ---

def tensor_create(shape: Sequence[int], fill=0.0, requires_grad: bool = False, dtype=np.float32) -> Tensor:
    """Create a tensor from a scalar fill or a row-major value list."""
    shape = tuple(int(s) for s in shape)
    if len(shape) != 4 or any(s < 1 for s in shape):
        raise ValueError(err_invalid(f"Shape {shape} is invalid.", "Use four dimensions, each >= 1."))
    if np.isscalar(fill):
        data = np.full(shape, fill, dtype=dtype)
    else:
        values = np.asarray(fill, dtype=dtype).reshape(-1)
        expected = int(np.prod(shape))
        if values.size != expected:
            raise ValueError(err_mismatch("Value count", expected, values.size))
        data = values.reshape(shape)
    return Tensor(data, requires_grad=requires_grad)


def full_like(x: Tensor, value: float) -> Tensor:
    return Tensor(np.full(x.shape, value, dtype=x.dtype))


# --- Elementwise and structural ops ---

def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> tuple[int, ...]:
    shape = []
    for da, db in zip(a.shape, b.shape):
        if da != db and da != 1 and db != 1:
            raise ValueError(err_mismatch(f"Operand shape in '{op}'", a.shape, b.shape))
        shape.append(max(da, db))
    return tuple(shape)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a, b, "add")

    def rule(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return apply_op("add", (a, b), a.data + b.data, rule)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a, b, "sub")

    def rule(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return apply_op("sub", (a, b), a.data - b.data, rule)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product; size-1 dims broadcast (e.g. (n,c,1,1) channel weights)."""
    _broadcast_shape(a, b, "mul")

    def rule(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return apply_op("mul", (a, b), a.data * b.data, rule)


def scale(x: Tensor, k: float) -> Tensor:
    k = x.dtype.type(k)

    def rule(g):
        return (g * k,)

    return apply_op("scale", (x,), x.data * k, rule)


def concat_channels(tensors: Sequence[Tensor]) -> Tensor:
    tensors = tuple(tensors)
    if not tensors:
        raise ValueError(err_invalid("concat_channels needs at least one tensor."))
    n, _, h, w = tensors[0].shape
    for t in tensors[1:]:
        if (t.n, t.h, t.w) != (n, h, w):
            raise ValueError(err_mismatch("Concat (n, h, w)", (n, h, w), (t.n, t.h, t.w)))
    bounds = np.cumsum([0] + [t.c for t in tensors])

    def rule(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(tensors)))

    return apply_op("concat_channels", tensors, np.concatenate([t.data for t in tensors], axis=1), rule)


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    if not 0 <= start < stop <= x.c:
        raise ValueError(err_invalid(f"Channel slice [{start}:{stop}] is out of range for {x.c} channels."))

    def rule(g):
        full = np.zeros_like(x.data)
        full[:, start:stop] = g
        return (full,)

    return apply_op("slice_channels", (x,), x.data[:, start:stop], rule)


def split_channels(x: Tensor, sizes: Sequence[int]) -> list[Tensor]:
    """Exact inverse of concat_channels for the given channel counts."""
    if sum(sizes) != x.c or any(s < 1 for s in sizes):
        raise ValueError(err_mismatch("Split channel total", x.c, sum(sizes)))
    bounds = np.cumsum([0] + list(sizes))
    return [slice_channels(x, int(bounds[i]), int(bounds[i + 1])) for i in range(len(sizes))]


def sum_all(x: Tensor) -> Tensor:
    def rule(g):
        return (np.broadcast_to(g, x.shape).copy(),)

    return apply_op("sum_all", (x,), x.data.sum().reshape(1, 1, 1, 1), rule)


def mean_all(x: Tensor) -> Tensor:
    count = x.size

    def rule(g):
        return (np.broadcast_to(g / count, x.shape).copy(),)

    return apply_op("mean_all", (x,), x.data.mean().reshape(1, 1, 1, 1), rule)


# --- Parameter store ---

class ParameterStore:
    """Named, ordered collection of learnable tensors."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, tensor: Tensor) -> Tensor:
        if name in self._params:
            raise ValueError(err_invalid(f"Parameter '{name}' already exists."))
        tensor.requires_grad = True
        tensor.zero_grad()
        self._params[name] = tensor
        return tensor

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def num_scalars(self) -> int:
        return sum(t.size for t in self._params.values())

    def zero_grad(self) -> None:
        for tensor in self._params.values():
            tensor.zero_grad()

    def grads(self) -> dict[str, np.ndarray | None]:
        return {name: t.grad for name, t in self._params.items()}

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: t.data for name, t in self._params.items()}

    def load_arrays(self, arrays: Mapping[str, np.ndarray]) -> None:
        """Copy values in place; names and shapes must match exactly."""
        missing = [n for n in self._params if n not in arrays]
        extra = [n for n in arrays if n not in self._params]
        if missing or extra:
            raise ValueError(err_invalid(
                "Parameter names do not match the model.",
                f"Missing: {', '.join(missing[:5]) or 'none'}; unexpected: {', '.join(extra[:5]) or 'none'}.",
            ))
        for name, tensor in self._params.items():
            values = arrays[name]
            if values.shape != tensor.shape:
                raise ValueError(err_mismatch(f"Shape of '{name}'", tensor.shape, values.shape))
            tensor.data[...] = values


# --- Binary container ---

MAGIC = b"DINW"
FORMAT_VERSION = 1
_HASH_BYTES = 32


def encode_parameters(arrays: Mapping[str, np.ndarray], config_digest: bytes | None = None) -> bytes:
    """Serialize named 4-D arrays into the DINW container.

    Layout: magic, version u32, count u32, scalar width u32, 32-byte config
    hash; then per array a u16 name length, UTF-8 name, four u32 dims and the
    little-endian IEEE-754 payload.
    """
    widths = {np.dtype(a.dtype).itemsize for a in arrays.values()}
    if len(widths) > 1:
        raise ValueError(err_invalid("All arrays in a container must share one scalar width."))
    width = widths.pop() if widths else 4
    if width not in (4, 8):
        raise ValueError(err_invalid(f"Unsupported scalar width {width}."))
    digest = config_digest or bytes(_HASH_BYTES)
    if len(digest) != _HASH_BYTES:
        raise ValueError(err_mismatch("Config hash length", _HASH_BYTES, len(digest)))

    payload_dtype = "<f4" if width == 4 else "<f8"
    chunks = [MAGIC, struct.pack("<III", FORMAT_VERSION, len(arrays), width), digest]
    for name, values in arrays.items():
        encoded = name.encode("utf-8")
        if values.ndim != 4:
            raise ValueError(err_mismatch(f"Rank of '{name}'", 4, values.ndim))
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<IIII", *values.shape))
        chunks.append(np.ascontiguousarray(values, dtype=payload_dtype).tobytes())
    return b"".join(chunks)


def decode_parameters(blob: bytes) -> tuple[dict[str, np.ndarray], bytes]:
    """Inverse of `encode_parameters`. Returns (arrays, config hash)."""
    if blob[:4] != MAGIC:
        raise ValueError(err_invalid("Not a DINW container (bad magic)."))
    header_end = 4 + 12 + _HASH_BYTES
    if len(blob) < header_end:
        raise ValueError(err_invalid("DINW container is truncated."))
    version, count, width = struct.unpack_from("<III", blob, 4)
    if version != FORMAT_VERSION:
        raise ValueError(err_mismatch("DINW version", FORMAT_VERSION, version))
    if width not in (4, 8):
        raise ValueError(err_invalid(f"Unsupported scalar width {width}."))
    digest = bytes(blob[16:header_end])
    payload_dtype = np.dtype("<f4" if width == 4 else "<f8")
    native = np.float32 if width == 4 else np.float64

    arrays: dict[str, np.ndarray] = {}
    offset = header_end
    try:
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", blob, offset)
            offset += 2
            name = blob[offset:offset + name_len].decode("utf-8")
            offset += name_len
            shape = struct.unpack_from("<IIII", blob, offset)
            offset += 16
            nbytes = int(np.prod(shape)) * width
            if offset + nbytes > len(blob):
                raise ValueError(err_invalid("DINW container is truncated."))
            values = np.frombuffer(blob, dtype=payload_dtype, count=int(np.prod(shape)), offset=offset)
            arrays[name] = values.reshape(shape).astype(native)
            offset += nbytes
    except struct.error as exc:
        raise ValueError(err_invalid("DINW container is truncated.")) from exc
    if offset != len(blob):
        raise ValueError(err_invalid("DINW container has trailing bytes."))
    return arrays, digest


# --- Finite-difference oracle ---

@dataclass
class GradCheckReport:
    """Outcome of comparing autograd gradients against central differences."""

    max_rel_error: float
    passed: bool
    checked: int
    worst: tuple[str, int] | None = None
    per_tensor: dict[str, float] = field(default_factory=dict)
    # Before any retry step; `max_rel_error` is after them
    primary_max_rel_error: float = 0.0
    retried: int = 0


def _scalar_value(out: Tensor) -> float:
    if out.shape != (1, 1, 1, 1):
        raise ValueError(err_mismatch("Checked function output shape", (1, 1, 1, 1), out.shape))
    return out.item()


def _central_difference(f: Callable[[], Tensor], flat: np.ndarray, i: int, step: float) -> float:
    original = flat[i]
    flat[i] = original + step
    f_plus = _scalar_value(f())
    flat[i] = original - step
    f_minus = _scalar_value(f())
    flat[i] = original
    return (f_plus - f_minus) / (2 * step)


def relative_error(a: float, b: float) -> float:
    return abs(a - b) / max(abs(a), abs(b), 1e-8)


def finite_diff_check_many(
    f: Callable[[], Tensor],
    tensors: Mapping[str, Tensor],
    epsilon: float = 1e-6,
    tolerance: float = 1e-4,
    sample: int | None = None,
    seed: int = 0,
    retry_steps: Sequence[float] = (100.0, 0.01),
) -> GradCheckReport:
    """Check d f()/d t for every named tensor t.

    Coordinates are perturbed in place by +/- epsilon and restored. With
    `sample`, at most that many coordinates per tensor are drawn (seeded).
    A coordinate over tolerance is checked again with epsilon scaled by each
    factor in `retry_steps` and keeps its smallest error: the wider step
    recovers gradients lost in roundoff, the narrower one steps clear of
    activation kinks. The report keeps the worst error at `epsilon` alone in
    `primary_max_rel_error` and counts the retried coordinates.
    """
    if epsilon <= 0:
        raise ValueError(err_invalid("epsilon must be positive."))
    for name, tensor in tensors.items():
        if not tensor.requires_grad:
            raise ValueError(err_invalid(f"Tensor '{name}' does not require grad."))
        tensor.zero_grad()

    with Tape() as tape:
        root = f()
        _scalar_value(root)
        tape.backward(root)
    analytic = {name: t.grad.copy() for name, t in tensors.items()}

    rng = np.random.default_rng(seed)
    worst_err, worst_at, checked = 0.0, None, 0
    primary_worst, retried = 0.0, 0
    per_tensor: dict[str, float] = {}
    for name, tensor in tensors.items():
        flat = tensor.data.reshape(-1)
        coords = np.arange(flat.size)
        if sample is not None and sample < flat.size:
            coords = np.sort(rng.choice(flat.size, size=sample, replace=False))
        grad_flat = analytic[name].reshape(-1)
        tensor_err = 0.0
        for i in coords:
            exact = float(grad_flat[i])
            err = relative_error(exact, _central_difference(f, flat, i, epsilon))
            primary_worst = max(primary_worst, err)
            retried += int(err >= tolerance)
            for factor in retry_steps:
                if err < tolerance:
                    break
                err = min(err, relative_error(exact, _central_difference(f, flat, i, epsilon * factor)))
            checked += 1
            tensor_err = max(tensor_err, err)
            if err > worst_err:
                worst_err, worst_at = err, (name, int(i))
        per_tensor[name] = tensor_err
    return GradCheckReport(worst_err, worst_err < tolerance, checked, worst_at, per_tensor, primary_worst, retried)


def finite_diff_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    epsilon: float = 1e-6,
    tolerance: float = 1e-4,
    sample: int | None = None,
    seed: int = 0,
) -> GradCheckReport:
    """Single-input form: compares d f(x)/dx against central differences."""
    return finite_diff_check_many(lambda: f(x), {"x": x}, epsilon, tolerance, sample, seed)
