"""Dense tensors with tape-based reverse-mode differentiation."""

from __future__ import annotations

import logging
from collections.abc import Callable, Iterator, Sequence
from contextlib import contextmanager
from contextvars import ContextVar
from dataclasses import dataclass, field
from functools import cache
from typing import Literal

import numpy as np
import numpy.typing as npt
from scipy.special import expit

from dsm.constants import STRAIGHT_THROUGH_TEMPERATURE
from dsm.errors import ContractError, NumericFailureError

logger = logging.getLogger(__name__)

type FloatArray = npt.NDArray[np.floating]
type DType = Literal["float32", "float64"]
type BackwardFn = Callable[[FloatArray], Sequence[FloatArray | None]]
type IndexKey = (
    int | slice | npt.NDArray[np.intp] | tuple[int | slice | npt.NDArray[np.intp], ...]
)

SUPPORTED_DTYPES: tuple[DType, ...] = ("float32", "float64")
SPATIAL_RANK = 4
KERNEL_SIZE = 3

_ACTIVE_TAPE: ContextVar[Tape | None] = ContextVar("active_tape", default=None)
_SURROGATE_FORWARD: ContextVar[bool] = ContextVar("surrogate_forward", default=False)


class Tensor:
    """Row-major dense array with an optional gradient accumulator."""

    __slots__ = ("data", "grad", "name", "requires_grad")

    def __init__(
        self,
        data: npt.ArrayLike,
        *,
        dtype: DType | None = None,
        requires_grad: bool = False,
        name: str = "",
    ) -> None:
        if dtype is None and isinstance(data, np.ndarray) and data.dtype.name in SUPPORTED_DTYPES:
            array = np.ascontiguousarray(data)
        else:
            array = np.ascontiguousarray(data, dtype=dtype or "float64")
        self.data: FloatArray = array
        self.grad: FloatArray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        """Extents of every axis."""
        return tuple(self.data.shape)

    @property
    def dtype(self) -> DType:
        """Name of the element type."""
        return "float32" if self.data.dtype == np.float32 else "float64"

    @property
    def ndim(self) -> int:
        """Number of axes."""
        return int(self.data.ndim)

    def item(self) -> float:
        """Return the value of a single-element tensor."""
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> FloatArray:
        """Return the underlying array."""
        return self.data

    def zero_grad(self) -> None:
        """Drop the accumulated gradient."""
        self.grad = None

    def accumulate(self, gradient: FloatArray) -> None:
        """Add ``gradient`` into the accumulator."""
        if gradient.shape != self.data.shape:
            msg = f"gradient shape {gradient.shape} does not match {self.data.shape}"
            raise ContractError(msg)
        gradient = gradient.astype(self.data.dtype, copy=False)
        if self.grad is None:
            self.grad = gradient.copy()
        else:
            self.grad += gradient

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label})"


@dataclass
class TapeNode:
    """One executed differentiable operation."""

    op: str
    output: Tensor
    inputs: tuple[Tensor, ...]
    backward: BackwardFn


@dataclass
class Tape:
    """Ordered record of differentiable operations, replayed in reverse."""

    nodes: list[TapeNode] = field(default_factory=list)
    _token: object | None = None

    def __enter__(self) -> Tape:
        """Make this tape the recording target."""
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc_info: object) -> None:
        """Stop recording."""
        if self._token is not None:
            _ACTIVE_TAPE.reset(self._token)  # type: ignore[arg-type]
            self._token = None

    def record(self, node: TapeNode) -> None:
        """Append an executed operation."""
        self.nodes.append(node)

    def backward(self, loss: Tensor) -> list[str]:
        """Propagate d(loss)/d(input) to every leaf; return the visited op names."""
        if loss.data.size != 1:
            msg = f"backward needs a scalar loss, got shape {loss.shape}"
            raise ContractError(msg)
        loss.grad = np.ones_like(loss.data)
        visited: list[str] = []
        for node in reversed(self.nodes):
            upstream = node.output.grad
            if upstream is None:
                continue
            visited.append(node.op)
            input_grads = node.backward(upstream)
            for source, gradient in zip(node.inputs, input_grads, strict=True):
                if gradient is not None and source.requires_grad:
                    source.accumulate(gradient)
            node.output.grad = None
        self.nodes.clear()
        logger.debug("backward visited %s nodes", len(visited))
        return visited


@contextmanager
def surrogate_forward() -> Iterator[None]:
    """Evaluate straight-through operations with their smooth surrogate."""
    token = _SURROGATE_FORWARD.set(True)
    try:
        yield
    finally:
        _SURROGATE_FORWARD.reset(token)


def parameter(data: npt.ArrayLike, *, dtype: DType, name: str = "") -> Tensor:
    """Create a leaf tensor that receives gradients."""
    return Tensor(data, dtype=dtype, requires_grad=True, name=name)


def constant(data: npt.ArrayLike, *, dtype: DType) -> Tensor:
    """Create a tensor that never receives gradients."""
    return Tensor(data, dtype=dtype)


def primitive(
    op: str,
    inputs: Sequence[Tensor],
    output: FloatArray,
    backward: BackwardFn,
) -> Tensor:
    """Wrap a forward result and record it on the active tape."""
    if not np.isfinite(output).all():
        msg = f"{op} produced non-finite values"
        raise NumericFailureError(msg)
    result = Tensor(output)
    tape = _ACTIVE_TAPE.get()
    if tape is not None and any(source.requires_grad for source in inputs):
        result.requires_grad = True
        tape.record(TapeNode(op=op, output=result, inputs=tuple(inputs), backward=backward))
    return result


def check_dtypes(op: str, *tensors: Tensor) -> None:
    """Raise unless every tensor shares one dtype."""
    dtypes = {tensor.dtype for tensor in tensors}
    if len(dtypes) > 1:
        msg = f"{op}: mixed dtypes {sorted(dtypes)}"
        raise ContractError(msg)


def check_same_shape(op: str, left: Tensor, right: Tensor) -> None:
    """Raise unless two tensors have identical shapes."""
    if left.shape != right.shape:
        msg = f"{op}: shapes {left.shape} and {right.shape} differ"
        raise ContractError(msg)


def add(left: Tensor, right: Tensor) -> Tensor:
    """Elementwise sum of equally shaped tensors."""
    check_same_shape("add", left, right)
    check_dtypes("add", left, right)
    return primitive("add", (left, right), left.data + right.data, lambda grad: (grad, grad))


def sub(left: Tensor, right: Tensor) -> Tensor:
    """Elementwise difference of equally shaped tensors."""
    check_same_shape("sub", left, right)
    check_dtypes("sub", left, right)
    return primitive("sub", (left, right), left.data - right.data, lambda grad: (grad, -grad))


def mul(left: Tensor, right: Tensor | float) -> Tensor:
    """Elementwise product with an equally shaped tensor or a python scalar."""
    if not isinstance(right, Tensor):
        factor = float(right)
        return primitive("mul", (left,), left.data * factor, lambda grad: (grad * factor,))
    check_same_shape("mul", left, right)
    check_dtypes("mul", left, right)
    return primitive(
        "mul",
        (left, right),
        left.data * right.data,
        lambda grad: (grad * right.data, grad * left.data),
    )


def div(left: Tensor, right: Tensor | float) -> Tensor:
    """Elementwise quotient by an equally shaped tensor or a python scalar."""
    if not isinstance(right, Tensor):
        return mul(left, 1.0 / float(right))
    check_same_shape("div", left, right)
    check_dtypes("div", left, right)
    if (right.data == 0).any():
        msg = "division by zero"
        raise NumericFailureError(msg)
    quotient = left.data / right.data
    return primitive(
        "div",
        (left, right),
        quotient,
        lambda grad: (grad / right.data, -grad * quotient / right.data),
    )


def neg(tensor: Tensor) -> Tensor:
    """Elementwise negation."""
    return primitive("neg", (tensor,), -tensor.data, lambda grad: (-grad,))


def add_scalar(tensor: Tensor, value: float) -> Tensor:
    """Add a python scalar to every entry."""
    return primitive("add_scalar", (tensor,), tensor.data + value, lambda grad: (grad,))


def exp(tensor: Tensor) -> Tensor:
    """Elementwise exponential."""
    out = np.exp(tensor.data)
    return primitive("exp", (tensor,), out, lambda grad: (grad * out,))


def log(tensor: Tensor) -> Tensor:
    """Elementwise natural logarithm."""
    if (tensor.data <= 0).any():
        msg = "log of a non-positive entry"
        raise NumericFailureError(msg)
    return primitive("log", (tensor,), np.log(tensor.data), lambda grad: (grad / tensor.data,))


def sigmoid(tensor: Tensor) -> Tensor:
    """Elementwise logistic function."""
    out = expit(tensor.data)
    return primitive("sigmoid", (tensor,), out, lambda grad: (grad * out * (1 - out),))


def silu(tensor: Tensor) -> Tensor:
    """Elementwise x·sigmoid(x)."""
    gate = expit(tensor.data)
    slope = gate * (1 + tensor.data * (1 - gate))
    return primitive("silu", (tensor,), tensor.data * gate, lambda grad: (grad * slope,))


def clip(tensor: Tensor, low: float, high: float) -> Tensor:
    """Clamp entries into [low, high]; gradient is zero outside the interval."""
    inside = (tensor.data >= low) & (tensor.data <= high)
    return primitive(
        "clip",
        (tensor,),
        np.clip(tensor.data, low, high),
        lambda grad: (grad * inside,),
    )


def total(tensor: Tensor, axis: int | None = None) -> Tensor:
    """Sum over one axis or over every entry."""
    shape = tensor.shape
    if axis is None:

        def backward_all(grad: FloatArray) -> tuple[FloatArray]:
            return (np.broadcast_to(grad, shape).copy(),)

        return primitive("sum", (tensor,), np.asarray(tensor.data.sum()), backward_all)

    def backward_axis(grad: FloatArray) -> tuple[FloatArray]:
        return (np.broadcast_to(np.expand_dims(grad, axis), shape).copy(),)

    return primitive("sum", (tensor,), tensor.data.sum(axis=axis), backward_axis)


def mean(tensor: Tensor) -> Tensor:
    """Mean over every entry."""
    return mul(total(tensor), 1.0 / tensor.data.size)


def matmul(left: Tensor, right: Tensor) -> Tensor:
    """Dense product of an m×k and a k×n matrix."""
    if left.ndim != 2 or right.ndim != 2 or left.shape[1] != right.shape[0]:  # noqa: PLR2004
        msg = f"matmul: incompatible shapes {left.shape} and {right.shape}"
        raise ContractError(msg)
    check_dtypes("matmul", left, right)
    return primitive(
        "matmul",
        (left, right),
        left.data @ right.data,
        lambda grad: (grad @ right.data.T, left.data.T @ grad),
    )


def transpose(tensor: Tensor) -> Tensor:
    """Swap the two axes of a matrix."""
    if tensor.ndim != 2:  # noqa: PLR2004
        msg = f"transpose needs a matrix, got {tensor.shape}"
        raise ContractError(msg)
    return primitive("transpose", (tensor,), tensor.data.T.copy(), lambda grad: (grad.T,))


def reshape(tensor: Tensor, shape: tuple[int, ...]) -> Tensor:
    """Reinterpret the row-major data with new extents."""
    if int(np.prod(shape)) != tensor.data.size:
        msg = f"reshape: cannot view {tensor.shape} as {shape}"
        raise ContractError(msg)
    original = tensor.shape
    return primitive(
        "reshape",
        (tensor,),
        tensor.data.reshape(shape),
        lambda grad: (grad.reshape(original),),
    )


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Join tensors along an existing axis."""
    check_dtypes("concat", *tensors)
    sizes = [tensor.shape[axis] for tensor in tensors]
    boundaries = np.cumsum(sizes)[:-1]

    def backward(grad: FloatArray) -> list[FloatArray]:
        return list(np.split(grad, boundaries, axis=axis))

    return primitive(
        "concat",
        tensors,
        np.concatenate([tensor.data for tensor in tensors], axis=axis),
        backward,
    )


def index(tensor: Tensor, key: IndexKey) -> Tensor:
    """Select entries with basic slices or integer arrays."""
    shape = tensor.shape
    dtype = tensor.data.dtype

    def backward(grad: FloatArray) -> tuple[FloatArray]:
        scattered = np.zeros(shape, dtype=dtype)
        np.add.at(scattered, key, grad)
        return (scattered,)

    return primitive("index", (tensor,), np.array(tensor.data[key]), backward)


def flip(tensor: Tensor, axis: int) -> Tensor:
    """Reverse the order of entries along ``axis``."""
    key = tuple(
        slice(None, None, -1) if position == axis else slice(None)
        for position in range(tensor.ndim)
    )
    return index(tensor, key)


def add_bias(tensor: Tensor, bias: Tensor) -> Tensor:
    """Add a length-m bias vector to every row of an n×m matrix."""
    if tensor.ndim != 2 or bias.shape != (tensor.shape[1],):  # noqa: PLR2004
        msg = f"add_bias: shapes {tensor.shape} and {bias.shape} do not align"
        raise ContractError(msg)
    check_dtypes("add_bias", tensor, bias)
    return primitive(
        "add_bias",
        (tensor, bias),
        tensor.data + bias.data,
        lambda grad: (grad, grad.sum(axis=0)),
    )


def scale_rows(tensor: Tensor, scales: Tensor) -> Tensor:
    """Multiply row k of a K×V matrix by ``scales[k]``."""
    if tensor.ndim != 2 or scales.shape != (tensor.shape[0],):  # noqa: PLR2004
        msg = f"scale_rows: shapes {tensor.shape} and {scales.shape} do not align"
        raise ContractError(msg)
    check_dtypes("scale_rows", tensor, scales)
    column = scales.data[:, None]
    return primitive(
        "scale_rows",
        (tensor, scales),
        tensor.data * column,
        lambda grad: (grad * column, (grad * tensor.data).sum(axis=1)),
    )


def row_normalize(tensor: Tensor) -> Tensor:
    """Scale each row of a matrix to unit Euclidean norm."""
    norms = np.linalg.norm(tensor.data, axis=1, keepdims=True)
    if (norms <= 0).any():
        msg = "row_normalize: zero-norm row"
        raise ContractError(msg)
    unit = tensor.data / norms

    def backward(grad: FloatArray) -> tuple[FloatArray]:
        radial = (unit * grad).sum(axis=1, keepdims=True)
        return ((grad - unit * radial) / norms,)

    return primitive("row_normalize", (tensor,), unit, backward)


def masked_softmax(logits: Tensor, mask: Tensor | None = None) -> Tensor:
    """Softmax over the last axis after adding a {0, −∞} mask."""
    shifted = logits.data
    if mask is not None:
        if np.broadcast_shapes(mask.shape, logits.shape) != logits.shape:
            msg = f"masked_softmax: mask {mask.shape} does not broadcast to {logits.shape}"
            raise ContractError(msg)
        shifted = shifted + mask.data
    row_max = shifted.max(axis=-1, keepdims=True)
    if not np.isfinite(row_max).all():
        msg = "masked_softmax: a row is fully masked"
        raise ContractError(msg)
    weights = np.exp(shifted - row_max)
    probs = weights / weights.sum(axis=-1, keepdims=True)

    def backward(grad: FloatArray) -> tuple[FloatArray]:
        return (probs * (grad - (grad * probs).sum(axis=-1, keepdims=True)),)

    return primitive("masked_softmax", (logits,), probs, backward)


def _check_volume(op: str, tensor: Tensor) -> None:
    if tensor.ndim != SPATIAL_RANK:
        msg = f"{op} needs a C×D×H×W volume, got {tensor.shape}"
        raise ContractError(msg)


def as_rows(volume: Tensor) -> Tensor:
    """View a C×D×H×W volume as an L×C matrix, positions in (d, h, w) order."""
    _check_volume("as_rows", volume)
    channels = volume.shape[0]
    return transpose(reshape(volume, (channels, volume.data.size // channels)))


def _im2col(padded: FloatArray, spatial: tuple[int, int, int]) -> FloatArray:
    windows = np.lib.stride_tricks.sliding_window_view(
        padded,
        (KERNEL_SIZE, KERNEL_SIZE, KERNEL_SIZE),
        axis=(1, 2, 3),
    )
    channels = padded.shape[0]
    # (C, D, H, W, 3, 3, 3) -> (C, 3, 3, 3, D, H, W)
    columns = windows.transpose(0, 4, 5, 6, 1, 2, 3)
    return columns.reshape(channels * KERNEL_SIZE**3, int(np.prod(spatial)))


def conv3(volume: Tensor, kernel: Tensor, bias: Tensor | None = None) -> Tensor:
    """3×3×3 cross-correlation with zero padding 1 and stride 1."""
    _check_volume("conv3", volume)
    channels_in, depth, height, width = volume.shape
    channels_out = kernel.shape[0]
    if kernel.shape != (channels_out, channels_in, KERNEL_SIZE, KERNEL_SIZE, KERNEL_SIZE):
        msg = f"conv3: kernel {kernel.shape} does not match {channels_in} input channels"
        raise ContractError(msg)
    inputs: tuple[Tensor, ...] = (volume, kernel)
    if bias is not None:
        if bias.shape != (channels_out,):
            msg = f"conv3: bias {bias.shape} does not match {channels_out} output channels"
            raise ContractError(msg)
        inputs = (volume, kernel, bias)
    check_dtypes("conv3", *inputs)
    spatial = (depth, height, width)
    padded = np.pad(volume.data, ((0, 0), (1, 1), (1, 1), (1, 1)))
    columns = _im2col(padded, spatial)
    weights = kernel.data.reshape(channels_out, -1)
    out = weights @ columns
    if bias is not None:
        out += bias.data[:, None]

    def backward(grad: FloatArray) -> list[FloatArray]:
        flat = grad.reshape(channels_out, -1)
        kernel_grad = (flat @ columns.T).reshape(kernel.shape)
        column_grad = (weights.T @ flat).reshape(
            channels_in, KERNEL_SIZE, KERNEL_SIZE, KERNEL_SIZE, *spatial
        )
        padded_grad = np.zeros_like(padded)
        for kd in range(KERNEL_SIZE):
            for kh in range(KERNEL_SIZE):
                for kw in range(KERNEL_SIZE):
                    padded_grad[:, kd : kd + depth, kh : kh + height, kw : kw + width] += (
                        column_grad[:, kd, kh, kw]
                    )
        grads = [padded_grad[:, 1:-1, 1:-1, 1:-1], kernel_grad]
        if bias is not None:
            grads.append(flat.sum(axis=1))
        return grads

    return primitive("conv3", inputs, out.reshape(channels_out, *spatial), backward)


def conv1x1(volume: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Pointwise channel projection of a C×D×H×W volume."""
    _check_volume("conv1x1", volume)
    channels_in = volume.shape[0]
    if weight.ndim != 2 or weight.shape[1] != channels_in:  # noqa: PLR2004
        msg = f"conv1x1: weight {weight.shape} does not match {channels_in} channels"
        raise ContractError(msg)
    inputs: tuple[Tensor, ...] = (volume, weight) if bias is None else (volume, weight, bias)
    check_dtypes("conv1x1", *inputs)
    spatial = volume.shape[1:]
    flat = volume.data.reshape(channels_in, -1)
    out = weight.data @ flat
    if bias is not None:
        out += bias.data[:, None]

    def backward(grad: FloatArray) -> list[FloatArray]:
        grad_flat = grad.reshape(weight.shape[0], -1)
        grads = [(weight.data.T @ grad_flat).reshape(volume.shape), grad_flat @ flat.T]
        if bias is not None:
            grads.append(grad_flat.sum(axis=1))
        return grads

    return primitive("conv1x1", inputs, out.reshape(weight.shape[0], *spatial), backward)


@cache
def linear_upsample_matrix(size: int, dtype: DType) -> FloatArray:
    """Interpolation matrix (2·size × size), align-corners = false convention."""
    target = np.arange(2 * size)
    source = np.clip((target + 0.5) / 2 - 0.5, 0, size - 1)
    lower = np.floor(source).astype(np.intp)
    upper = np.minimum(lower + 1, size - 1)
    frac = source - lower
    matrix = np.zeros((2 * size, size), dtype=dtype)
    np.add.at(matrix, (target, lower), 1 - frac)
    np.add.at(matrix, (target, upper), frac)
    matrix.setflags(write=False)
    return matrix


def upsample_array(volume: FloatArray) -> FloatArray:
    """Trilinear ×2 upsampling of a C×D×H×W array."""
    dtype: DType = "float32" if volume.dtype == np.float32 else "float64"
    _, depth, height, width = volume.shape
    along_d = linear_upsample_matrix(depth, dtype)
    along_h = linear_upsample_matrix(height, dtype)
    along_w = linear_upsample_matrix(width, dtype)
    return np.einsum(
        "cdhw,Dd,Hh,Ww->cDHW", volume, along_d, along_h, along_w, optimize=True
    )


def upsample2(volume: Tensor) -> Tensor:
    """Differentiable trilinear ×2 upsampling (align-corners = false)."""
    _check_volume("upsample2", volume)
    _, depth, height, width = volume.shape
    along_d = linear_upsample_matrix(depth, volume.dtype)
    along_h = linear_upsample_matrix(height, volume.dtype)
    along_w = linear_upsample_matrix(width, volume.dtype)

    def backward(grad: FloatArray) -> tuple[FloatArray]:
        return (
            np.einsum("cDHW,Dd,Hh,Ww->cdhw", grad, along_d, along_h, along_w, optimize=True),
        )

    return primitive("upsample2", (volume,), upsample_array(volume.data), backward)


def downsample2(volume: Tensor) -> Tensor:
    """Nearest-neighbour ×2 downsampling; output voxel i reads input voxel 2i."""
    _check_volume("downsample2", volume)
    if any(extent % 2 for extent in volume.shape[1:]):
        msg = f"downsample2 needs even extents, got {volume.shape}"
        raise ContractError(msg)
    shape = volume.shape
    dtype = volume.data.dtype

    def backward(grad: FloatArray) -> tuple[FloatArray]:
        scattered = np.zeros(shape, dtype=dtype)
        scattered[:, ::2, ::2, ::2] = grad
        return (scattered,)

    return primitive(
        "downsample2", (volume,), volume.data[:, ::2, ::2, ::2].copy(), backward
    )


def argmax_onehot(scores: FloatArray) -> FloatArray:
    """One-hot of the per-column maximum; ties go to the lowest row."""
    winners = np.argmax(scores, axis=0)
    onehot = np.zeros_like(scores)
    onehot[winners, np.arange(scores.shape[1])] = 1
    return onehot


def column_softmax(scores: FloatArray, temperature: float) -> FloatArray:
    """Softmax down each column of ``scores / temperature``."""
    scaled = scores / temperature
    weights = np.exp(scaled - scaled.max(axis=0, keepdims=True))
    return weights / weights.sum(axis=0, keepdims=True)


def argmax_straight_through(
    scores: Tensor,
    temperature: float = STRAIGHT_THROUGH_TEMPERATURE,
) -> Tensor:
    """Hard query-wise argmax forward, column-softmax gradient backward."""
    if scores.ndim != 2:  # noqa: PLR2004
        msg = f"argmax_straight_through needs a matrix, got {scores.shape}"
        raise ContractError(msg)
    soft = column_softmax(scores.data, temperature)
    hard = soft if _SURROGATE_FORWARD.get() else argmax_onehot(scores.data)

    def backward(grad: FloatArray) -> tuple[FloatArray]:
        return (soft * (grad - (grad * soft).sum(axis=0, keepdims=True)) / temperature,)

    return primitive("argmax_straight_through", (scores,), hard, backward)
