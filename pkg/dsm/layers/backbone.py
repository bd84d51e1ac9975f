"""Small residual 3-D convolutional encoder–decoder."""

import logging
from dataclasses import dataclass

import numpy as np

from dsm.constants import DESK_OUTPUT_STRIDES, PYRAMID_DEPTH
from dsm.core.tensor import DType, Tensor, add, downsample2, silu, upsample2
from dsm.errors import ContractError
from dsm.layers.module import Conv3, Module, Pointwise

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class FeaturePyramid:
    """Decoder features coarse to fine plus the full-resolution embedding."""

    features: tuple[Tensor, ...]
    embedding: Tensor
    strides: tuple[int, ...] = DESK_OUTPUT_STRIDES


class ResidualUnit(Module):
    """x + conv(silu(conv(x)))."""

    def __init__(self, channels: int, rng: np.random.Generator, *, dtype: DType) -> None:
        self.conv_a = Conv3(channels, channels, rng, dtype=dtype)
        self.conv_b = Conv3(channels, channels, rng, dtype=dtype)
        self.conv_b.kernel.data *= 0.1

    def __call__(self, volume: Tensor) -> Tensor:
        """Apply the unit."""
        return add(volume, self.conv_b(silu(self.conv_a(volume))))


class Backbone(Module):
    """Four-level encoder–decoder producing F_1..F_4 at strides 8/4/2/1."""

    def __init__(
        self,
        channels: tuple[int, ...],
        embed_width: int,
        patch_size: int,
        rng: np.random.Generator,
        *,
        dtype: DType,
    ) -> None:
        if len(channels) != PYRAMID_DEPTH:
            msg = f"backbone needs {PYRAMID_DEPTH} channel widths, got {channels}"
            raise ContractError(msg)
        if patch_size % 2 ** (PYRAMID_DEPTH - 1):
            msg = f"patch size {patch_size} is not divisible by {2 ** (PYRAMID_DEPTH - 1)}"
            raise ContractError(msg)
        self.patch_size = patch_size
        self.stem = Conv3(1, channels[0], rng, dtype=dtype)
        self.encoders = [ResidualUnit(width, rng, dtype=dtype) for width in channels]
        self.downs = [
            Conv3(channels[level], channels[level + 1], rng, dtype=dtype)
            for level in range(PYRAMID_DEPTH - 1)
        ]
        self.ups = [
            Pointwise(channels[level + 1], channels[level], rng, dtype=dtype)
            for level in reversed(range(PYRAMID_DEPTH - 1))
        ]
        self.decoders = [
            ResidualUnit(channels[level], rng, dtype=dtype)
            for level in reversed(range(PYRAMID_DEPTH - 1))
        ]
        self.embed = Pointwise(channels[0], embed_width, rng, dtype=dtype)

    def __call__(self, volume: Tensor) -> FeaturePyramid:
        """Run a 1×P×P×P volume through the network."""
        expected = (1, self.patch_size, self.patch_size, self.patch_size)
        if volume.shape != expected:
            msg = f"backbone expects a volume of shape {expected}, got {volume.shape}"
            raise ContractError(msg)
        hidden = self.encoders[0](silu(self.stem(volume)))
        skips = [hidden]
        for down, encoder in zip(self.downs, self.encoders[1:], strict=True):
            hidden = encoder(silu(down(downsample2(hidden))))
            skips.append(hidden)

        features = [hidden]
        for up, decoder, skip in zip(self.ups, self.decoders, reversed(skips[:-1]), strict=True):
            hidden = decoder(add(up(upsample2(hidden)), skip))
            features.append(hidden)
        return FeaturePyramid(features=tuple(features), embedding=self.embed(hidden))
