"""JSON headers of the binary container formats."""

from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, JsonValue

from dsm.constants import PROMPT_TEMPLATE

SPATIAL_DIMS = 3


class VolumeHeader(BaseModel):
    """Header of a ``.dsmvol`` file."""

    model_config = ConfigDict(extra="forbid")

    dims: list[int] = Field(min_length=SPATIAL_DIMS, max_length=SPATIAL_DIMS)
    classes: list[str] = Field(min_length=1)
    labeled_classes: list[int] = Field(default_factory=list)


class TextBankHeader(BaseModel):
    """Header of a ``.dsmtxt`` file."""

    model_config = ConfigDict(extra="forbid")

    dim: int = Field(gt=0)
    names: list[str]
    template: str = PROMPT_TEMPLATE


class TensorEntry(BaseModel):
    """Location of one named tensor inside a checkpoint payload."""

    model_config = ConfigDict(extra="forbid")

    name: str
    dtype: Literal["float32", "float64"]
    shape: list[int]
    offset: int = Field(ge=0)


class CheckpointHeader(BaseModel):
    """Header of a ``.dsmc`` file."""

    model_config = ConfigDict(extra="forbid")

    stage: Literal[1, 2]
    step: int = Field(ge=0)
    epoch: int = Field(ge=0)
    config_digest: str
    config: dict[str, JsonValue]
    best_metric: float | None = None
    query_classes: list[str] = Field(default_factory=list)
    tensors: list[TensorEntry]
