"""
Diffusion-guided query refinement.

One explicit step of guided nonlinear diffusion enhances a feature map,
the enhanced map feeds a prompt-masked cross attention for the tumor
queries, and is fused into the next pyramid scale.
"""

import itertools
import logging

import numpy as np

from dsm.constants import DIFFUSION_STABILIZER
from dsm.core.tensor import (
    DType,
    FloatArray,
    Tensor,
    add,
    as_rows,
    concat,
    constant,
    index,
    masked_softmax,
    matmul,
    mul,
    parameter,
    primitive,
    transpose,
    upsample2,
)
from dsm.errors import ContractError
from dsm.layers.module import Conv3, Linear, Module, Pointwise

logger = logging.getLogger(__name__)

type Offset = tuple[int, int, int]
type Window = tuple[slice, slice, slice, slice]

NEIGHBOR_OFFSETS: tuple[Offset, ...] = tuple(
    offset for offset in itertools.product((-1, 0, 1), repeat=3) if offset != (0, 0, 0)
)


def diffusivity(squared: FloatArray, kappa: float | FloatArray) -> FloatArray:
    """Exponential edge-stopping function exp(−s/κ²)."""
    return np.exp(-squared / np.square(kappa))


def neighbor_windows(extents: tuple[int, ...], offset: Offset) -> tuple[Window, Window]:
    """Slices selecting every in-bounds position p and its neighbour p + offset."""
    centre = [slice(None)]
    neighbour = [slice(None)]
    for extent, step in zip(extents, offset, strict=True):
        centre.append(slice(max(0, -step), extent - max(0, step)))
        neighbour.append(slice(max(0, step), extent + min(0, step)))
    return (
        (centre[0], centre[1], centre[2], centre[3]),
        (neighbour[0], neighbour[1], neighbour[2], neighbour[3]),
    )


def diffusion_step(features: Tensor, guidance: Tensor, log_kappa: Tensor) -> Tensor:
    """
    F̂[p] = λ Σ_q g(‖D[q] − D[p]‖²)·(F[q] − F[p]) over the 26 neighbours q of p.

    Out-of-bounds neighbours are skipped (zero flux). κ is per feature
    channel, λ = 1/26.
    """
    if features.ndim != 4 or guidance.ndim != 4 or features.shape[1:] != guidance.shape[1:]:  # noqa: PLR2004
        msg = f"diffusion_step: features {features.shape} and guidance {guidance.shape} do not align"
        raise ContractError(msg)
    if log_kappa.shape != (features.shape[0],):
        msg = f"diffusion_step: κ {log_kappa.shape} does not match {features.shape[0]} channels"
        raise ContractError(msg)
    extents = features.shape[1:]
    kappa = np.exp(log_kappa.data)[:, None, None, None]
    inverse_kappa_sq = 1 / np.square(kappa)
    weight_scale = DIFFUSION_STABILIZER
    out = np.zeros_like(features.data)
    for offset in NEIGHBOR_OFFSETS:
        centre, neighbour = neighbor_windows(extents, offset)
        squared = np.square(guidance.data[neighbour] - guidance.data[centre]).sum(axis=0)
        conductance = diffusivity(squared[None], kappa)
        out[centre] += weight_scale * conductance * (features.data[neighbour] - features.data[centre])

    def backward(grad: FloatArray) -> tuple[FloatArray, FloatArray, FloatArray]:
        d_features = np.zeros_like(features.data)
        d_guidance = np.zeros_like(guidance.data)
        d_log_kappa = np.zeros_like(log_kappa.data)
        for offset in NEIGHBOR_OFFSETS:
            centre, neighbour = neighbor_windows(extents, offset)
            difference = guidance.data[neighbour] - guidance.data[centre]
            squared = np.square(difference).sum(axis=0)
            conductance = diffusivity(squared[None], kappa)
            upstream = grad[centre]
            flux = weight_scale * conductance * upstream
            d_features[neighbour] += flux
            d_features[centre] -= flux
            d_conductance = weight_scale * (features.data[neighbour] - features.data[centre]) * upstream
            sensitivity = d_conductance * conductance
            d_squared = -(sensitivity * inverse_kappa_sq).sum(axis=0)
            d_log_kappa += (sensitivity * 2 * squared[None] * inverse_kappa_sq).sum(axis=(1, 2, 3))
            d_difference = 2 * difference * d_squared[None]
            d_guidance[neighbour] += d_difference
            d_guidance[centre] -= d_difference
        return d_features, d_guidance, d_log_kappa

    return primitive("diffusion_step", (features, guidance, log_kappa), out, backward)


def fuse_features(
    features: Tensor,
    enhanced: Tensor,
    mixer: Conv3 | Pointwise,
    projection: Pointwise,
) -> Tensor:
    """Mix F + F̂, upsample ×2 and project to the next scale's channels."""
    return projection(upsample2(mixer(add(features, enhanced))))


def multi_head_attention(
    queries: Tensor,
    keys: Tensor,
    values: Tensor,
    heads: int,
    mask: FloatArray | None = None,
) -> Tensor:
    """Scaled dot-product attention with an optional additive {0, −∞} mask over keys."""
    width = queries.shape[1]
    if width % heads or keys.shape[1] != width or values.shape[1] != width:
        msg = f"attention: widths {queries.shape}, {keys.shape}, {values.shape} with {heads} heads"
        raise ContractError(msg)
    head_dim = width // heads
    mask_tensor = None if mask is None else constant(mask[None, :], dtype=queries.dtype)
    outputs = []
    for head in range(heads):
        columns = (slice(None), slice(head * head_dim, (head + 1) * head_dim))
        logits = mul(
            matmul(index(queries, columns), transpose(index(keys, columns))),
            1 / np.sqrt(head_dim),
        )
        outputs.append(matmul(masked_softmax(logits, mask_tensor), index(values, columns)))
    return outputs[0] if heads == 1 else concat(outputs, axis=1)


class PromptMaskedAttention(Module):
    """Residual cross attention of queries over enhanced features, gated by a mask prompt."""

    def __init__(
        self,
        width: int,
        source_channels: int,
        heads: int,
        rng: np.random.Generator,
        *,
        dtype: DType,
    ) -> None:
        self.heads = heads
        self.query_proj = Linear(width, width, rng, dtype=dtype)
        self.key_proj = Linear(source_channels, width, rng, dtype=dtype)
        self.value_proj = Linear(source_channels, width, rng, dtype=dtype)
        self.out_proj = Linear(width, width, rng, dtype=dtype)

    def __call__(self, queries: Tensor, source: Tensor, mask: FloatArray) -> Tensor:
        """Update N×C queries from a channels×D×H×W source volume."""
        rows = as_rows(source)
        attended = multi_head_attention(
            self.query_proj(queries),
            self.key_proj(rows),
            self.value_proj(rows),
            self.heads,
            mask,
        )
        return add(queries, self.out_proj(attended))


def prompt_masked_attention(
    attention: PromptMaskedAttention,
    queries: Tensor,
    features: Tensor,
    enhanced: Tensor,
    mask: FloatArray,
) -> Tensor:
    """T̂ = T + W_o·Softmax(M + QKᵀ/√d)V with K, V from [F, F̂]."""
    return attention(queries, concat([features, enhanced], axis=0), mask)


class JointSelfAttention(Module):
    """Residual self attention over the stacked organ and tumor queries."""

    def __init__(self, width: int, heads: int, rng: np.random.Generator, *, dtype: DType) -> None:
        self.heads = heads
        self.query_proj = Linear(width, width, rng, dtype=dtype)
        self.key_proj = Linear(width, width, rng, dtype=dtype)
        self.value_proj = Linear(width, width, rng, dtype=dtype)
        self.out_proj = Linear(width, width, rng, dtype=dtype, zero_init=True)

    def __call__(self, organs: Tensor, tumors: Tensor) -> Tensor:
        """Return the refined (N_o + N_T)×C query stack."""
        stacked = concat([organs, tumors], axis=0)
        attended = multi_head_attention(
            self.query_proj(stacked),
            self.key_proj(stacked),
            self.value_proj(stacked),
            self.heads,
        )
        return add(stacked, self.out_proj(attended))


class DqrBlock(Module):
    """
    One decoder block at a pyramid scale.

    With ``diffuse`` off the enhanced map is zero and a pointwise mixer
    replaces the 3×3×3 convolution. With ``anomaly_channel`` on the
    normalized anomaly map is appended to the attention source.
    """

    def __init__(  # noqa: PLR0913
        self,
        channels: int,
        next_channels: int | None,
        query_width: int,
        guidance_channels: int,
        heads: int,
        rng: np.random.Generator,
        *,
        dtype: DType,
        kappa_init: float = 1.0,
        diffuse: bool = True,
        anomaly_channel: bool = False,
        guidance_in: int | None = None,
    ) -> None:
        self.dtype: DType = dtype
        self.diffuse = diffuse
        self.anomaly_channel = anomaly_channel
        self.guidance: Pointwise | None = None
        self.log_kappa: Tensor | None = None
        self.mixer: Conv3 | Pointwise | None = None
        self.projection: Pointwise | None = None
        if diffuse:
            self.guidance = Pointwise(guidance_in or channels, guidance_channels, rng, dtype=dtype)
            self.log_kappa = parameter(np.full(channels, np.log(kappa_init), dtype=dtype), dtype=dtype)
        if next_channels is not None:
            self.mixer = (
                Conv3(channels, channels, rng, dtype=dtype)
                if diffuse
                else Pointwise(channels, channels, rng, dtype=dtype)
            )
            self.projection = Pointwise(channels, next_channels, rng, dtype=dtype)
        self.tumor_in = Linear(query_width, channels, rng, dtype=dtype)
        self.tumor_out = Linear(channels, query_width, rng, dtype=dtype)
        source_channels = 2 * channels + (1 if anomaly_channel else 0)
        self.attention = PromptMaskedAttention(channels, source_channels, heads, rng, dtype=dtype)

    def enhance(self, features: Tensor, guidance_source: Tensor | None = None) -> Tensor:
        """Boundary-enhanced map F̂ of this scale."""
        if self.guidance is None or self.log_kappa is None:
            return constant(np.zeros_like(features.data), dtype=self.dtype)
        guidance = self.guidance(features if guidance_source is None else guidance_source)
        return diffusion_step(features, guidance, self.log_kappa)

    def __call__(
        self,
        features: Tensor,
        tumors: Tensor,
        mask: FloatArray,
        anomaly: FloatArray | None = None,
        guidance_source: Tensor | None = None,
    ) -> tuple[Tensor, Tensor | None]:
        """Refine the tumor queries; return them with the fused next-scale features."""
        enhanced = self.enhance(features, guidance_source)
        source = concat([features, enhanced], axis=0)
        if self.anomaly_channel:
            if anomaly is None:
                msg = "anomaly map required as an attention channel"
                raise ContractError(msg)
            extra = constant(anomaly.reshape(1, *features.shape[1:]), dtype=self.dtype)
            source = concat([source, extra], axis=0)
        local = self.attention(self.tumor_in(tumors), source, mask)
        refined = add(tumors, self.tumor_out(local))
        if self.mixer is None or self.projection is None:
            return refined, None
        return refined, fuse_features(features, enhanced, self.mixer, self.projection)
