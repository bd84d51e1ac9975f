from pathlib import Path

import numpy as np
from pydantic import JsonValue

from dsm.core.config import RunConfig, load_run_config
from dsm.core.tensor import Tensor, parameter
from dsm.data.volume_io import VolumeSample
from dsm.layers.ssm import SsmParams

TINY_PATCH = 32
TINY_TEXT_DIM = 8


def random_leaf(rng: np.random.Generator, *shape: int) -> Tensor:
    return parameter(rng.standard_normal(shape), dtype="float64")


def random_ssm_params(rng: np.random.Generator, channels: int, states: int) -> SsmParams:
    return SsmParams(
        a=-rng.uniform(0.1, 2.0, size=(channels, states)),
        b=rng.standard_normal((channels, states)),
        c=rng.standard_normal((channels, states)),
        dt=rng.uniform(1e-3, 1e-1, size=channels),
    )


def memoryless_ssm_params(channels: int) -> SsmParams:
    """One-state filters with Ā ≈ 0: the output tracks the input."""
    return SsmParams(
        a=np.full((channels, 1), -50.0),
        b=np.full((channels, 1), 50.0),
        c=np.ones((channels, 1)),
        dt=np.ones(channels),
    )


def tiny_config(data: Path, out: Path, **overrides: JsonValue) -> RunConfig:
    """A model small enough to train for a few steps inside a test."""
    flat: dict[str, JsonValue] = {
        "data.patch_size": TINY_PATCH,
        "data.text_dim": TINY_TEXT_DIM,
        "model.channels": [4, 4, 4, 4],
        "model.width": 4,
        "model.heads": 2,
        "model.state_dim": 2,
        "model.guidance_channels": 2,
        "model.text_dim": TINY_TEXT_DIM,
        "model.temperature": 0.1,
        "model.cluster_norm": "mean",
        "train.epochs_stage1": 1,
        "train.epochs_stage2": 1,
        "train.batch_size": 1,
        "train.max_steps_per_epoch": 2,
        "paths.data": str(data),
        "paths.out": str(out),
    }
    flat.update(overrides)
    return load_run_config(None, flat)


def labeled_cube(classes: tuple[str, ...], size: int = 8) -> VolumeSample:
    """A volume whose every foreground class occupies one slab."""
    label = np.zeros((size, size, size), dtype=np.uint8)
    for index in range(1, len(classes)):
        label[index % size] = index
    rng = np.random.default_rng(size)
    return VolumeSample(
        image=rng.random((size, size, size)).astype(np.float32),
        label=label,
        classes=classes,
        labeled_classes=tuple(range(1, len(classes))),
    )
