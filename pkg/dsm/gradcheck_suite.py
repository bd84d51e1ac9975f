"""Finite-difference checks of every differentiable building block."""

import logging
from collections.abc import Callable, Sequence
from dataclasses import dataclass

import numpy as np

from dsm.constants import COMPOSITE_TOLERANCE, PRIMITIVE_TOLERANCE
from dsm.core.gradcheck import gradcheck
from dsm.core.tensor import (
    FloatArray,
    Tensor,
    constant,
    conv3,
    masked_softmax,
    matmul,
    parameter,
    sigmoid,
    silu,
)
from dsm.errors import UsageError
from dsm.layers.align import cosine_softmax, orthonormal_bank
from dsm.layers.backbone import Backbone
from dsm.layers.dqr import (
    JointSelfAttention,
    PromptMaskedAttention,
    diffusion_step,
    fuse_features,
    prompt_masked_attention,
)
from dsm.layers.kmmm import KmmmBlock
from dsm.layers.module import Conv3, Pointwise
from dsm.layers.ssm import SsmLayer
from dsm.models import GradcheckReport, GradcheckResult
from dsm.training.losses import DiceMode, bce_loss, dice_loss, stage2_bce

logger = logging.getLogger(__name__)

type Problem = tuple[Callable[[], Tensor], list[Tensor]]

MASKED_FRACTION = 0.3
TARGET_DENSITY = 0.4


@dataclass(frozen=True)
class GradcheckCase:
    """A seeded problem builder and the tolerance it must meet."""

    build: Callable[[np.random.Generator], Problem]
    tolerance: float


def _leaf(rng: np.random.Generator, *shape: int) -> Tensor:
    return parameter(rng.standard_normal(shape), dtype="float64")


def _additive_mask(rng: np.random.Generator, length: int) -> FloatArray:
    mask = np.where(rng.random(length) < MASKED_FRACTION, -np.inf, 0.0)
    mask[0] = 0.0
    return mask


def _matmul(rng: np.random.Generator) -> Problem:
    left, right = _leaf(rng, 3, 4), _leaf(rng, 4, 2)
    return (lambda: matmul(left, right)), [left, right]


def _masked_softmax(rng: np.random.Generator) -> Problem:
    logits = _leaf(rng, 3, 5)
    mask = constant(_additive_mask(rng, 5), dtype="float64")
    return (lambda: masked_softmax(logits, mask)), [logits]


def _silu(rng: np.random.Generator) -> Problem:
    values = _leaf(rng, 4, 3)
    return (lambda: silu(values)), [values]


def _conv3(rng: np.random.Generator) -> Problem:
    volume, kernel, bias = _leaf(rng, 2, 4, 4, 4), _leaf(rng, 3, 2, 3, 3, 3), _leaf(rng, 3)
    return (lambda: conv3(volume, kernel, bias)), [volume, kernel, bias]


def _ssm_layer(rng: np.random.Generator) -> Problem:
    layer = SsmLayer(3, 4, rng, dtype="float64", direction="bidirectional")
    signal = _leaf(rng, 3, 10)
    return (lambda: layer(signal)), [signal, *layer.parameters()]


def _kmmm_block(rng: np.random.Generator) -> Problem:
    block = KmmmBlock(4, 3, 2, rng, dtype="float64")
    queries, features = _leaf(rng, 3, 4), _leaf(rng, 8, 4)
    return (lambda: block(queries, features)[0]), [queries, features]


def _diffusion_fuse(rng: np.random.Generator) -> Problem:
    features, guidance = _leaf(rng, 2, 4, 4, 4), _leaf(rng, 2, 4, 4, 4)
    log_kappa = parameter(rng.uniform(-0.3, 0.3, size=2), dtype="float64")
    mixer, projection = Conv3(2, 2, rng, dtype="float64"), Pointwise(2, 3, rng, dtype="float64")

    def run() -> Tensor:
        return fuse_features(features, diffusion_step(features, guidance, log_kappa), mixer, projection)

    return run, [features, guidance, log_kappa]


def _prompt_masked_attention(rng: np.random.Generator) -> Problem:
    attention = PromptMaskedAttention(4, 4, 2, rng, dtype="float64")
    queries = _leaf(rng, 3, 4)
    features, enhanced = _leaf(rng, 2, 2, 2, 2), _leaf(rng, 2, 2, 2, 2)
    mask = _additive_mask(rng, 8)

    def run() -> Tensor:
        return prompt_masked_attention(attention, queries, features, enhanced, mask)

    return run, [queries, features, enhanced]


def _joint_self_attention(rng: np.random.Generator) -> Problem:
    attention = JointSelfAttention(4, 2, rng, dtype="float64")
    attention.out_proj.weight.data = rng.standard_normal((4, 4))
    organs, tumors = _leaf(rng, 3, 4), _leaf(rng, 2, 4)
    return (lambda: attention(organs, tumors)), [organs, tumors]


def _cosine_softmax(rng: np.random.Generator) -> Problem:
    bank = orthonormal_bank(("a", "b", "c", "d"), 5, int(rng.integers(1 << 16)))
    projected = _leaf(rng, 3, 5)
    return (lambda: cosine_softmax(projected, bank, 0.5)), [projected]


def _targets(rng: np.random.Generator) -> FloatArray:
    return (rng.random((3, 12)) < TARGET_DENSITY).astype(np.float64)


def _dice(mode: DiceMode) -> Callable[[np.random.Generator], Problem]:
    def build(rng: np.random.Generator) -> Problem:
        targets, logits = _targets(rng), _leaf(rng, 3, 12)
        return (lambda: dice_loss(targets, sigmoid(logits), [0, 2], mode)), [logits]

    return build


def _bce(rng: np.random.Generator) -> Problem:
    targets, logits = _targets(rng), _leaf(rng, 3, 12)
    return (lambda: bce_loss(targets, sigmoid(logits), [0, 1])), [logits]


def _stage2_bce(rng: np.random.Generator) -> Problem:
    targets, logits, p_logits = _targets(rng), _leaf(rng, 3, 12), _leaf(rng, 2)
    return (lambda: stage2_bce(targets, sigmoid(logits), sigmoid(p_logits), [1, 2])), [logits, p_logits]


def _backbone(rng: np.random.Generator) -> Problem:
    backbone = Backbone((2, 2, 2, 2), 2, 8, rng, dtype="float64")
    volume = _leaf(rng, 1, 8, 8, 8)
    return (lambda: backbone(volume).embedding), [volume]


SUITE: dict[str, GradcheckCase] = {
    "matmul": GradcheckCase(_matmul, PRIMITIVE_TOLERANCE),
    "masked_softmax": GradcheckCase(_masked_softmax, PRIMITIVE_TOLERANCE),
    "silu": GradcheckCase(_silu, PRIMITIVE_TOLERANCE),
    "conv3": GradcheckCase(_conv3, PRIMITIVE_TOLERANCE),
    "ssm_layer": GradcheckCase(_ssm_layer, COMPOSITE_TOLERANCE),
    "kmmm_block": GradcheckCase(_kmmm_block, COMPOSITE_TOLERANCE),
    "diffusion_fuse": GradcheckCase(_diffusion_fuse, COMPOSITE_TOLERANCE),
    "prompt_masked_attention": GradcheckCase(_prompt_masked_attention, COMPOSITE_TOLERANCE),
    "joint_self_attention": GradcheckCase(_joint_self_attention, COMPOSITE_TOLERANCE),
    "cosine_softmax": GradcheckCase(_cosine_softmax, PRIMITIVE_TOLERANCE),
    "dice_aggregated": GradcheckCase(_dice("aggregated"), PRIMITIVE_TOLERANCE),
    "dice_per_voxel": GradcheckCase(_dice("per_voxel"), PRIMITIVE_TOLERANCE),
    "bce": GradcheckCase(_bce, PRIMITIVE_TOLERANCE),
    "stage2_bce": GradcheckCase(_stage2_bce, PRIMITIVE_TOLERANCE),
    "backbone": GradcheckCase(_backbone, COMPOSITE_TOLERANCE),
}


def run_suite(seed: int, ops: Sequence[str] | None = None) -> GradcheckReport:
    """Check the named operations, every one when ``ops`` is empty."""
    names = list(ops) if ops else list(SUITE)
    unknown = [name for name in names if name not in SUITE]
    if unknown:
        msg = f"unknown gradcheck ops {unknown}; choose from {sorted(SUITE)}"
        raise UsageError(msg)
    results = []
    for position, name in enumerate(names):
        case = SUITE[name]
        fn, wrt = case.build(np.random.default_rng([seed, position]))
        error = gradcheck(fn, wrt, seed)
        results.append(GradcheckResult(op=name, max_rel_err=error, tolerance=case.tolerance))
        logger.info("gradcheck %s: max relative error %.3e (tolerance %.0e)", name, error, case.tolerance)
    return GradcheckReport(seed=seed, results=results)
