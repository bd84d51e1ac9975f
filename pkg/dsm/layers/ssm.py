"""
Diagonal linear state space layer.

Continuous parameters (A, B, C, Δ) are discretized with the zero-order
hold rule and run as a recurrence h_t = Ā h_{t−1} + B̄ x_t, y_t = C h_t
with h_{−1} = 0. A is kept negative through A = −exp(a_log).
"""

import logging
from dataclasses import dataclass
from typing import Literal

import numpy as np

from dsm.constants import ZOH_SERIES_THRESHOLD
from dsm.core.tensor import (
    DType,
    FloatArray,
    Tensor,
    add,
    flip,
    mul,
    parameter,
    primitive,
)
from dsm.errors import ContractError
from dsm.layers.module import Module

logger = logging.getLogger(__name__)

type Direction = Literal["forward", "bidirectional"]

SCAN_CHUNK = 64
DT_MIN = 1e-3
DT_MAX = 1e-1


@dataclass(frozen=True)
class SsmParams:
    """Continuous diagonal parameters; leading axes index channels."""

    a: FloatArray
    b: FloatArray
    c: FloatArray
    dt: FloatArray | float

    def __post_init__(self) -> None:
        """Reject unstable evolution parameters."""
        if (np.asarray(self.a) >= 0).any():
            msg = "state space evolution parameters must be negative"
            raise ContractError(msg)


@dataclass(frozen=True)
class SsmDiscrete:
    """Zero-order-hold discretized parameters."""

    a_bar: FloatArray
    b_bar: FloatArray


def zoh_input_gain(z: FloatArray) -> FloatArray:
    """(e^z − 1)/z, switching to 1 + z/2 near zero."""
    small = np.abs(z) < ZOH_SERIES_THRESHOLD
    safe = np.where(small, 1.0, z)
    return np.where(small, 1 + z / 2, np.expm1(safe) / safe)


def zoh_input_gain_slope(z: FloatArray) -> FloatArray:
    """Derivative of :func:`zoh_input_gain`."""
    small = np.abs(z) < ZOH_SERIES_THRESHOLD
    safe = np.where(small, 1.0, z)
    return np.where(small, 0.5 + z / 3, (safe * np.exp(safe) - np.expm1(safe)) / safe**2)


def zoh_discretize(params: SsmParams) -> SsmDiscrete:
    """Ā = exp(ΔA), B̄ = (ΔA)⁻¹(exp(ΔA) − 1)·ΔB elementwise."""
    dt = np.asarray(params.dt, dtype=np.asarray(params.a).dtype)
    if (dt <= 0).any():
        msg = "state space step size must be positive"
        raise ContractError(msg)
    step = dt[..., None]
    z = step * params.a
    return SsmDiscrete(a_bar=np.exp(z), b_bar=zoh_input_gain(z) * step * params.b)


def ssm_scan(discrete: SsmDiscrete, c: FloatArray, x: FloatArray) -> FloatArray:
    """Reference recurrence over the last axis of ``x``."""
    state = np.zeros(np.broadcast_shapes(discrete.a_bar.shape, x.shape[:-1] + (1,)), dtype=x.dtype)
    y = np.empty_like(x)
    for step in range(x.shape[-1]):
        state = discrete.a_bar * state + discrete.b_bar * x[..., step, None]
        y[..., step] = (c * state).sum(axis=-1)
    return y


def ssm_kernel(discrete: SsmDiscrete, c: FloatArray, length: int) -> FloatArray:
    """Convolution kernel K_t = C Ā^t B̄ for t < length."""
    lags = np.arange(length)[:, None]
    powers = discrete.a_bar[..., None, :] ** lags
    return (c[..., None, :] * powers * discrete.b_bar[..., None, :]).sum(axis=-1)


def ssm_convolve(discrete: SsmDiscrete, c: FloatArray, x: FloatArray) -> FloatArray:
    """Causal convolution of ``x`` with the state space kernel."""
    length = x.shape[-1]
    kernel = ssm_kernel(discrete, c, length)
    y = np.zeros_like(x)
    for step in range(length):
        y[..., step] = (kernel[..., step::-1] * x[..., : step + 1]).sum(axis=-1)
    return y


def linear_recurrence(decay: FloatArray, drive: FloatArray) -> FloatArray:
    """
    Solve h_t = decay ⊙ h_{t−1} + drive_t, h_{−1} = 0, for an R×L×N drive.

    Works in chunks: inside a chunk the states are a lower-triangular
    power matrix applied to the drive, and chunk boundaries carry the
    last state forward.
    """
    channels, length, states = drive.shape
    if length == 0:
        return drive.copy()
    chunk = min(SCAN_CHUNK, length)
    chunks = -(-length // chunk)
    padded = np.zeros((channels, chunks * chunk, states), dtype=drive.dtype)
    padded[:, :length] = drive
    blocks = padded.reshape(channels, chunks, chunk, states)

    lags = np.arange(chunk)
    gap = lags[:, None] - lags[None, :]
    causal = gap >= 0
    weights = np.where(causal, decay[:, :, None, None] ** np.where(causal, gap, 0), 0)
    local = np.einsum("rnts,rmsn->rmtn", weights, blocks)
    lead = decay[:, None, :] ** (lags + 1)[:, None]

    solved = np.empty_like(local)
    carry = np.zeros((channels, states), dtype=drive.dtype)
    for index in range(chunks):
        solved[:, index] = local[:, index] + lead * carry[:, None, :]
        carry = solved[:, index, -1]
    return solved.reshape(channels, chunks * chunk, states)[:, :length]


def _check_scan_shapes(x: Tensor, a_log: Tensor, log_dt: Tensor, b: Tensor, c: Tensor) -> None:
    channels = x.shape[0]
    if x.ndim != 2:  # noqa: PLR2004
        msg = f"ssm scan needs a channels×L input, got {x.shape}"
        raise ContractError(msg)
    if a_log.ndim != 2 or a_log.shape[0] != channels:  # noqa: PLR2004
        msg = f"ssm scan: parameters {a_log.shape} do not match {channels} channels"
        raise ContractError(msg)
    if b.shape != a_log.shape or c.shape != a_log.shape or log_dt.shape != (channels,):
        msg = "ssm scan: parameter shapes disagree"
        raise ContractError(msg)


def ssm_scan_op(x: Tensor, a_log: Tensor, log_dt: Tensor, b: Tensor, c: Tensor) -> Tensor:
    """Differentiable per-channel scan; the backward pass is the adjoint scan."""
    _check_scan_shapes(x, a_log, log_dt, b, c)
    evolution = -np.exp(a_log.data)
    dt = np.exp(log_dt.data)[:, None]
    z = dt * evolution
    a_bar = np.exp(z)
    gain = zoh_input_gain(z)
    b_bar = gain * dt * b.data
    states = linear_recurrence(a_bar, b_bar[:, None, :] * x.data[:, :, None])
    y = np.einsum("rln,rn->rl", states, c.data)

    def backward(grad: FloatArray) -> tuple[FloatArray, ...]:
        drive = c.data[:, None, :] * grad[:, :, None]
        adjoint = linear_recurrence(a_bar, drive[:, ::-1])[:, ::-1]
        previous = np.zeros_like(states)
        previous[:, 1:] = states[:, :-1]
        d_a_bar = np.einsum("rln,rln->rn", adjoint, previous)
        d_b_bar = np.einsum("rln,rl->rn", adjoint, x.data)
        d_z = d_a_bar * a_bar + d_b_bar * dt * b.data * zoh_input_gain_slope(z)
        d_dt = d_b_bar * gain * b.data + d_z * evolution
        return (
            np.einsum("rln,rn->rl", adjoint, b_bar),
            d_z * dt * evolution,
            (d_dt * dt).sum(axis=1),
            d_b_bar * gain * dt,
            np.einsum("rl,rln->rn", grad, states),
        )

    return primitive("ssm_scan", (x, a_log, log_dt, b, c), y, backward)


class SsmLayer(Module):
    """Independent diagonal state space filters, one per input channel."""

    def __init__(
        self,
        channels: int,
        state_dim: int,
        rng: np.random.Generator,
        *,
        dtype: DType,
        direction: Direction = "forward",
    ) -> None:
        decay_rates = np.broadcast_to(np.arange(1, state_dim + 1, dtype=dtype), (channels, state_dim))
        log_dt = rng.uniform(np.log(DT_MIN), np.log(DT_MAX), size=channels)
        self.a_log = parameter(np.log(decay_rates), dtype=dtype)
        self.log_dt = parameter(log_dt.astype(dtype), dtype=dtype)
        self.b = parameter(np.ones((channels, state_dim), dtype=dtype), dtype=dtype)
        # unit DC gain per channel: Σ_n C_n·B_n/|A_n| = 1
        self.c = parameter(decay_rates / state_dim, dtype=dtype)
        self.direction: Direction = direction

    def continuous(self) -> SsmParams:
        """Current parameters in continuous form."""
        return SsmParams(
            a=-np.exp(self.a_log.data),
            b=self.b.data.copy(),
            c=self.c.data.copy(),
            dt=np.exp(self.log_dt.data),
        )

    def discrete(self) -> SsmDiscrete:
        """Current parameters after discretization."""
        return zoh_discretize(self.continuous())

    def scan(self, x: Tensor) -> Tensor:
        """Forward-direction scan of a channels×L input."""
        return ssm_scan_op(x, self.a_log, self.log_dt, self.b, self.c)

    def __call__(self, x: Tensor) -> Tensor:
        """Filter every channel of a channels×L input."""
        forward = self.scan(x)
        if self.direction == "forward":
            return forward
        backward = flip(self.scan(flip(x, axis=1)), axis=1)
        return mul(add(forward, backward), 0.5)
