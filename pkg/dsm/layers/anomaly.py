"""Anomaly scores and {0, −∞} mask prompts from query affinities."""

import logging

import numpy as np

from dsm.constants import DEGENERATE_RANGE, MASK_THRESHOLD
from dsm.core.tensor import DType, FloatArray, upsample_array
from dsm.errors import ContractError

logger = logging.getLogger(__name__)


def anomaly_score(scores: FloatArray) -> FloatArray:
    """Negative maximal query response at every position of an N×L affinity."""
    return -scores.max(axis=0)


def normalize_minmax(raw: FloatArray) -> FloatArray:
    """Rescale to [0, 1]; a constant map becomes all ones."""
    low = raw.min()
    spread = raw.max() - low
    if spread < DEGENERATE_RANGE:
        logger.debug("degenerate anomaly map, opening every position")
        return np.ones_like(raw)
    return (raw - low) / spread


def mask_prompt(normalized: FloatArray) -> FloatArray:
    """0 where the score exceeds the threshold, −∞ elsewhere; never fully closed."""
    candidates = normalized > MASK_THRESHOLD
    if not candidates.any():
        return np.zeros_like(normalized)
    return np.where(candidates, 0.0, -np.inf).astype(normalized.dtype)


def open_mask(length: int, dtype: DType = "float64") -> FloatArray:
    """A mask letting every position through."""
    return np.zeros(length, dtype=dtype)


def upsample_to_volume(score: FloatArray, stride: int) -> FloatArray:
    """Bring a D×H×W map at ``stride`` to full resolution with trilinear ×2 steps."""
    if stride < 1 or stride & (stride - 1):
        msg = f"stride must be a power of two, got {stride}"
        raise ContractError(msg)
    volume = score[None]
    while stride > 1:
        volume = upsample_array(volume)
        stride //= 2
    return volume[0]
