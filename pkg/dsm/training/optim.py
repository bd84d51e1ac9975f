"""AdamW with decoupled weight decay and a warm-up cosine schedule."""

import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np

from dsm.core.tensor import FloatArray, Tensor
from dsm.errors import ContractError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class AdamWHyper:
    """Step hyperparameters."""

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 1e-5
    eps: float = 1e-8


@dataclass
class OptimState:
    """First and second moments per parameter name, and the step counter."""

    first: dict[str, FloatArray] = field(default_factory=dict)
    second: dict[str, FloatArray] = field(default_factory=dict)
    step: int = 0


def adamw_step(
    params: Sequence[tuple[str, FloatArray]],
    grads: Sequence[FloatArray | None],
    state: OptimState,
    hyper: AdamWHyper,
) -> OptimState:
    """
    Update ``params`` in place and return the advanced state.

    Decay is applied to the weights directly (p ← p − lr·wd·p) before the
    bias-corrected moment update. Entries whose gradient is None are left
    untouched, moments included.
    """
    if len(params) != len(grads):
        msg = f"{len(params)} parameters but {len(grads)} gradients"
        raise ContractError(msg)
    step = state.step + 1
    first_correction = 1 - hyper.beta1**step
    second_correction = 1 - hyper.beta2**step
    for (name, values), grad in zip(params, grads, strict=True):
        if grad is None:
            continue
        if grad.shape != values.shape:
            msg = f"gradient of {name} has shape {grad.shape}, expected {values.shape}"
            raise ContractError(msg)
        first = state.first.setdefault(name, np.zeros_like(values))
        second = state.second.setdefault(name, np.zeros_like(values))
        first *= hyper.beta1
        first += (1 - hyper.beta1) * grad
        second *= hyper.beta2
        second += (1 - hyper.beta2) * np.square(grad)
        values -= hyper.lr * hyper.weight_decay * values
        values -= hyper.lr * (first / first_correction) / (np.sqrt(second / second_correction) + hyper.eps)
    state.step = step
    return state


def warmup_cosine(step: int, total_steps: int, peak_lr: float, warmup_fraction: float) -> float:
    """Linear warm-up to ``peak_lr`` over the first steps, then cosine decay to zero."""
    if total_steps <= 0:
        msg = f"schedule needs a positive step budget, got {total_steps}"
        raise ContractError(msg)
    warmup = min(round(warmup_fraction * total_steps), total_steps - 1)
    if step < warmup:
        return peak_lr * (step + 1) / warmup
    progress = (step - warmup) / max(total_steps - warmup, 1)
    return peak_lr * 0.5 * (1 + math.cos(math.pi * min(progress, 1.0)))


class AdamW:
    """Optimizer over a fixed list of named parameters."""

    def __init__(
        self,
        params: Sequence[tuple[str, Tensor]],
        hyper: AdamWHyper,
        total_steps: int,
        warmup_fraction: float,
    ) -> None:
        self.params = list(params)
        self.hyper = hyper
        self.total_steps = total_steps
        self.warmup_fraction = warmup_fraction
        self.state = OptimState()

    def current_lr(self) -> float:
        """Scheduled learning rate of the next step."""
        return warmup_cosine(self.state.step, self.total_steps, self.hyper.lr, self.warmup_fraction)

    def step(self) -> float:
        """Apply one update from the accumulated gradients; return the lr used."""
        lr = self.current_lr()
        hyper = AdamWHyper(
            lr=lr,
            beta1=self.hyper.beta1,
            beta2=self.hyper.beta2,
            weight_decay=self.hyper.weight_decay,
            eps=self.hyper.eps,
        )
        adamw_step(
            [(name, tensor.data) for name, tensor in self.params],
            [tensor.grad for _, tensor in self.params],
            self.state,
            hyper,
        )
        return lr

    def zero_grad(self) -> None:
        """Drop every accumulated gradient."""
        for _, tensor in self.params:
            tensor.zero_grad()

    def moments(self) -> tuple[dict[str, FloatArray], dict[str, FloatArray]]:
        """First and second moments keyed by parameter name."""
        return self.state.first, self.state.second

    def load_moments(
        self,
        first: dict[str, FloatArray],
        second: dict[str, FloatArray],
        step: int,
    ) -> None:
        """Restore moments and the step counter saved by a checkpoint."""
        names = {name for name, _ in self.params}
        unknown = (set(first) | set(second)) - names
        if unknown:
            msg = f"optimizer state for unknown parameters {sorted(unknown)}"
            raise ContractError(msg)
        self.state = OptimState(
            first={name: values.copy() for name, values in first.items()},
            second={name: values.copy() for name, values in second.items()},
            step=step,
        )
