"""Parameter containers and the basic learnable layers."""

import logging
from collections.abc import Iterator, Mapping

import numpy as np

from dsm.core.tensor import (
    DType,
    FloatArray,
    Tensor,
    add_bias,
    conv1x1,
    conv3,
    matmul,
    parameter,
)
from dsm.errors import ContractError

logger = logging.getLogger(__name__)


class Module:
    """
    Base class of everything that owns parameters.

    Parameters are the attributes holding gradient-receiving tensors; child
    modules (and lists of them) contribute their parameters under a dotted
    prefix. Names follow attribute assignment order.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        """Yield every parameter with its dotted name."""
        for attribute, value in vars(self).items():
            name = f"{prefix}{attribute}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{name}.")
            elif isinstance(value, list):
                for position, child in enumerate(value):
                    if isinstance(child, Module):
                        yield from child.named_parameters(f"{name}.{position}.")

    def parameters(self) -> list[Tensor]:
        """Every parameter in naming order."""
        return [tensor for _, tensor in self.named_parameters()]

    def zero_grad(self) -> None:
        """Drop every accumulated gradient."""
        for tensor in self.parameters():
            tensor.zero_grad()

    def state(self) -> dict[str, FloatArray]:
        """Copies of every parameter array by name."""
        return {name: tensor.data.copy() for name, tensor in self.named_parameters()}

    def load_state(self, state: Mapping[str, FloatArray], *, strict: bool = True) -> list[str]:
        """Overwrite parameters from ``state``; return the names that were loaded."""
        loaded = []
        for name, tensor in self.named_parameters():
            if name not in state:
                if strict:
                    msg = f"missing parameter {name}"
                    raise ContractError(msg)
                continue
            values = state[name]
            if values.shape != tensor.shape:
                msg = f"parameter {name}: shape {values.shape} does not match {tensor.shape}"
                raise ContractError(msg)
            tensor.data[...] = values
            loaded.append(name)
        logger.debug("loaded %s parameters", len(loaded))
        return loaded


def uniform_init(
    rng: np.random.Generator,
    shape: tuple[int, ...],
    fan_in: int,
    dtype: DType,
) -> FloatArray:
    """Uniform values in ±1/√fan_in."""
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Linear(Module):
    """Row-wise affine map x·W + b for an n×in matrix."""

    def __init__(
        self,
        in_features: int,
        out_features: int,
        rng: np.random.Generator,
        *,
        dtype: DType,
        zero_init: bool = False,
    ) -> None:
        shape = (in_features, out_features)
        values = (
            np.zeros(shape, dtype=dtype)
            if zero_init
            else uniform_init(rng, shape, in_features, dtype)
        )
        self.weight = parameter(values, dtype=dtype)
        self.bias = parameter(np.zeros(out_features, dtype=dtype), dtype=dtype)

    def __call__(self, rows: Tensor) -> Tensor:
        """Apply the map to every row."""
        return add_bias(matmul(rows, self.weight), self.bias)


class Pointwise(Module):
    """1×1×1 convolution: a channel projection at every voxel."""

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        rng: np.random.Generator,
        *,
        dtype: DType,
    ) -> None:
        self.weight = parameter(
            uniform_init(rng, (out_channels, in_channels), in_channels, dtype),
            dtype=dtype,
        )
        self.bias = parameter(np.zeros(out_channels, dtype=dtype), dtype=dtype)

    def __call__(self, volume: Tensor) -> Tensor:
        """Project the channels of a C×D×H×W volume."""
        return conv1x1(volume, self.weight, self.bias)


class Conv3(Module):
    """3×3×3 convolution with He-normal initialization."""

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        rng: np.random.Generator,
        *,
        dtype: DType,
    ) -> None:
        fan_in = in_channels * 27
        kernel = rng.standard_normal((out_channels, in_channels, 3, 3, 3)) * np.sqrt(2.0 / fan_in)
        self.kernel = parameter(kernel.astype(dtype), dtype=dtype)
        self.bias = parameter(np.zeros(out_channels, dtype=dtype), dtype=dtype)

    def __call__(self, volume: Tensor) -> Tensor:
        """Convolve a C×D×H×W volume."""
        return conv3(volume, self.kernel, self.bias)

    def set_identity(self) -> None:
        """Make the convolution pass its input through unchanged."""
        out_channels, in_channels = self.kernel.shape[:2]
        if out_channels != in_channels:
            msg = "identity initialization needs equal channel counts"
            raise ContractError(msg)
        self.kernel.data[...] = 0
        for channel in range(out_channels):
            self.kernel.data[channel, channel, 1, 1, 1] = 1
        self.bias.data[...] = 0
