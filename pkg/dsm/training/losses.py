"""Partial-label segmentation losses."""

from collections.abc import Sequence
from typing import Literal

import numpy as np

from dsm.constants import BCE_CLAMP, DICE_EPSILON
from dsm.core.tensor import (
    FloatArray,
    Tensor,
    add,
    add_scalar,
    clip,
    constant,
    div,
    index,
    log,
    mul,
    neg,
    scale_rows,
    sub,
    total,
)
from dsm.errors import ContractError

type DiceMode = Literal["aggregated", "per_voxel"]


def _labeled_rows(
    targets: FloatArray,
    predictions: Tensor,
    labeled: Sequence[int],
) -> tuple[FloatArray, Tensor]:
    if targets.shape != predictions.shape:
        msg = f"targets {targets.shape} and predictions {predictions.shape} differ"
        raise ContractError(msg)
    rows = np.asarray(labeled, dtype=np.intp)
    if rows.size and (rows.min() < 0 or rows.max() >= targets.shape[0]):
        msg = f"labeled rows {list(labeled)} outside {targets.shape[0]} classes"
        raise ContractError(msg)
    return targets[rows].astype(predictions.data.dtype), index(predictions, rows)


def _zero(predictions: Tensor) -> Tensor:
    return constant(np.zeros(1, dtype=predictions.data.dtype), dtype=predictions.dtype)


def dice_loss(
    targets: FloatArray,
    predictions: Tensor,
    labeled: Sequence[int],
    mode: DiceMode = "aggregated",
) -> Tensor:
    """
    Dice loss summed over labeled classes.

    ``per_voxel`` sums 1 − 2YŶ/(Y + Ŷ + ε) over every voxel, so a true
    negative voxel costs 1. ``aggregated`` is the usual
    1 − (2ΣYŶ + ε)/(ΣY + ΣŶ + ε) per class.
    """
    if not labeled:
        return _zero(predictions)
    selected, soft = _labeled_rows(targets, predictions, labeled)
    target = constant(selected, dtype=predictions.dtype)
    if mode == "per_voxel":
        ratio = div(mul(mul(soft, target), 2.0), add_scalar(add(soft, target), DICE_EPSILON))
        return add_scalar(neg(total(ratio)), float(selected.size))
    overlap = add_scalar(mul(total(mul(soft, target), axis=1), 2.0), DICE_EPSILON)
    sizes = constant(selected.sum(axis=1), dtype=predictions.dtype)
    union = add_scalar(add(total(soft, axis=1), sizes), DICE_EPSILON)
    return add_scalar(neg(total(div(overlap, union))), float(selected.shape[0]))


def _log_terms(soft: Tensor) -> tuple[Tensor, Tensor]:
    clamped = clip(soft, BCE_CLAMP, 1 - BCE_CLAMP)
    return log(clamped), log(add_scalar(neg(clamped), 1.0))


def bce_loss(targets: FloatArray, predictions: Tensor, labeled: Sequence[int]) -> Tensor:
    """Binary cross-entropy summed over the voxels of labeled classes."""
    if not labeled:
        return _zero(predictions)
    selected, soft = _labeled_rows(targets, predictions, labeled)
    target = constant(selected, dtype=predictions.dtype)
    complement = constant(1 - selected, dtype=predictions.dtype)
    log_positive, log_negative = _log_terms(soft)
    return neg(total(add(mul(target, log_positive), mul(complement, log_negative))))


def stage2_bce(
    targets: FloatArray,
    predictions: Tensor,
    p_diag: Tensor,
    labeled: Sequence[int],
) -> Tensor:
    """
    BCE against diag(p)·Y, the class-confidence-weighted targets.

    ``p_diag`` holds one probability per labeled class in ``labeled``
    order. The loss is differentiable in both the masks and ``p_diag``.
    """
    if not labeled:
        return _zero(predictions)
    if p_diag.shape != (len(labeled),):
        msg = f"p_diag {p_diag.shape} does not match {len(labeled)} labeled classes"
        raise ContractError(msg)
    selected, soft = _labeled_rows(targets, predictions, labeled)
    weighted = scale_rows(constant(selected, dtype=predictions.dtype), p_diag)
    log_positive, log_negative = _log_terms(soft)
    # T·log Ŷ + (1 − T)·log(1 − Ŷ) = log(1 − Ŷ) + T·(log Ŷ − log(1 − Ŷ))
    return neg(total(add(log_negative, mul(weighted, sub(log_positive, log_negative)))))


def segmentation_loss(
    targets: FloatArray,
    predictions: Tensor,
    labeled: Sequence[int],
    mode: DiceMode = "aggregated",
    p_diag: Tensor | None = None,
) -> Tensor:
    """Dice plus BCE; the BCE uses weighted targets when ``p_diag`` is given."""
    dice = dice_loss(targets, predictions, labeled, mode)
    if p_diag is None:
        return add(dice, bce_loss(targets, predictions, labeled))
    return add(dice, stage2_bce(targets, predictions, p_diag, labeled))
