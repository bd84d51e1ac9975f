"""Finite-difference verification of tape gradients."""

import logging
from collections.abc import Callable, Sequence

import numpy as np

from dsm.constants import GRADCHECK_EPSILON, GRADCHECK_FLOOR
from dsm.core.tensor import FloatArray, Tape, Tensor, constant, mul, surrogate_forward, total
from dsm.errors import ContractError

logger = logging.getLogger(__name__)


def _objective(output: Tensor, weights: FloatArray) -> float:
    return float((output.data * weights).sum())


def gradcheck(
    fn: Callable[[], Tensor],
    wrt: Sequence[Tensor],
    seed: int,
    *,
    epsilon: float = GRADCHECK_EPSILON,
) -> float:
    """
    Compare tape gradients of ``fn`` with central differences.

    The output is reduced to a scalar with seeded random weights. Inputs in
    ``wrt`` are perturbed in place and restored. Straight-through operations
    run in surrogate mode so both sides differentiate the same function.
    Returns max|analytic − numeric| / max(max|numeric|, floor).
    """
    if any(tensor.dtype != "float64" for tensor in wrt):
        msg = "gradcheck runs in float64 only"
        raise ContractError(msg)
    rng = np.random.default_rng(seed)
    with surrogate_forward():
        probe = fn()
        weights = rng.standard_normal(probe.shape)

        for tensor in wrt:
            tensor.requires_grad = True
            tensor.zero_grad()
        with Tape() as tape:
            loss = total(mul(fn(), constant(weights, dtype="float64")))
        tape.backward(loss)
        analytic = [
            tensor.grad.copy() if tensor.grad is not None else np.zeros_like(tensor.data)
            for tensor in wrt
        ]

        numeric = []
        for tensor in wrt:
            estimate = np.zeros_like(tensor.data)
            flat = tensor.data.reshape(-1)
            for position in range(flat.size):
                original = flat[position]
                flat[position] = original + epsilon
                upper = _objective(fn(), weights)
                flat[position] = original - epsilon
                lower = _objective(fn(), weights)
                flat[position] = original
                estimate.reshape(-1)[position] = (upper - lower) / (2 * epsilon)
            numeric.append(estimate)

    scale = max(max(float(np.abs(grad).max(initial=0)) for grad in numeric), GRADCHECK_FLOOR)
    error = max(
        float(np.abs(exact - approx).max(initial=0))
        for exact, approx in zip(analytic, numeric, strict=True)
    )
    for tensor in wrt:
        tensor.zero_grad()
    logger.debug("gradcheck max relative error %s", error / scale)
    return error / scale
