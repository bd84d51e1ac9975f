"""``.dsmc`` checkpoints: parameters, optimizer moments and training position."""

import logging
from collections.abc import Mapping
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal

import numpy as np
from pydantic import JsonValue

from dsm.constants import CHECKPOINT_MAGIC
from dsm.core.container import blob, read_container, take_blob, write_container
from dsm.core.tensor import FloatArray
from dsm.errors import DataError
from dsm.models import CheckpointHeader, TensorEntry

logger = logging.getLogger(__name__)

PARAM_PREFIX = "param/"
FIRST_MOMENT_PREFIX = "adam_m/"
SECOND_MOMENT_PREFIX = "adam_v/"


@dataclass
class Checkpoint:
    """Everything a run needs to continue or to be evaluated."""

    stage: Literal[1, 2]
    step: int
    epoch: int
    config_digest: str
    config: dict[str, JsonValue]
    params: dict[str, FloatArray]
    first_moments: dict[str, FloatArray] = field(default_factory=dict)
    second_moments: dict[str, FloatArray] = field(default_factory=dict)
    best_metric: float | None = None
    query_classes: tuple[str, ...] = ()


def _tables(checkpoint: Checkpoint) -> list[tuple[str, FloatArray]]:
    groups: list[tuple[str, Mapping[str, FloatArray]]] = [
        (PARAM_PREFIX, checkpoint.params),
        (FIRST_MOMENT_PREFIX, checkpoint.first_moments),
        (SECOND_MOMENT_PREFIX, checkpoint.second_moments),
    ]
    return [(f"{prefix}{name}", values) for prefix, table in groups for name, values in table.items()]


def save_checkpoint(path: Path, checkpoint: Checkpoint) -> None:
    """Write ``checkpoint`` with its tensors in parameter, first, second moment order."""
    entries = []
    blobs = []
    offset = 0
    for name, values in _tables(checkpoint):
        if values.dtype not in (np.float32, np.float64):
            msg = f"tensor {name} has unsupported dtype {values.dtype}"
            raise DataError(msg)
        dtype: Literal["float32", "float64"] = "float32" if values.dtype == np.float32 else "float64"
        data = blob(values)
        entries.append(TensorEntry(name=name, dtype=dtype, shape=list(values.shape), offset=offset))
        blobs.append(data)
        offset += len(data)
    header = CheckpointHeader(
        stage=checkpoint.stage,
        step=checkpoint.step,
        epoch=checkpoint.epoch,
        config_digest=checkpoint.config_digest,
        config=checkpoint.config,
        best_metric=checkpoint.best_metric,
        query_classes=list(checkpoint.query_classes),
        tensors=entries,
    )
    write_container(path, CHECKPOINT_MAGIC, header, blobs)
    logger.info("saved stage %s checkpoint at step %s to %s", checkpoint.stage, checkpoint.step, path)


def load_checkpoint(path: Path) -> Checkpoint:
    """Read a ``.dsmc`` file; every tensor must lie inside the payload."""
    header, payload = read_container(path, CHECKPOINT_MAGIC, CheckpointHeader)
    tables: dict[str, dict[str, FloatArray]] = {
        PARAM_PREFIX: {},
        FIRST_MOMENT_PREFIX: {},
        SECOND_MOMENT_PREFIX: {},
    }
    end = 0
    for entry in header.tensors:
        prefix = next((candidate for candidate in tables if entry.name.startswith(candidate)), None)
        if prefix is None:
            msg = f"checkpoint tensor {entry.name!r} has no known prefix"
            raise DataError(msg)
        dtype = np.float32 if entry.dtype == "float32" else np.float64
        values = take_blob(payload, entry.offset, entry.shape, dtype)
        tables[prefix][entry.name.removeprefix(prefix)] = values
        end = max(end, entry.offset + values.nbytes)
    if end != len(payload):
        msg = f"checkpoint payload has {len(payload)} bytes, tensors cover {end}"
        raise DataError(msg)
    return Checkpoint(
        stage=header.stage,
        step=header.step,
        epoch=header.epoch,
        config_digest=header.config_digest,
        config=header.config,
        params=tables[PARAM_PREFIX],
        first_moments=tables[FIRST_MOMENT_PREFIX],
        second_moments=tables[SECOND_MOMENT_PREFIX],
        best_metric=header.best_metric,
        query_classes=tuple(header.query_classes),
    )
