"""Run configuration settings."""

import hashlib
import json
import logging
from collections.abc import Mapping
from pathlib import Path
from typing import Literal, Self

from pydantic import BaseModel, ConfigDict, Field, JsonValue, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from dsm.constants import (
    DESK_UNSEEN_TUMOR,
    FULL_SCALE_ATTENTION_HEADS,
    FULL_SCALE_EPOCHS,
    FULL_SCALE_ORGAN_CLASSES,
    FULL_SCALE_PATCH_SIZE,
    FULL_SCALE_STAGE1_LR,
    FULL_SCALE_STAGE2_LR,
    FULL_SCALE_TUMOR_CLASSES,
    FULL_SCALE_WARMUP_EPOCHS,
    PYRAMID_DEPTH,
)
from dsm.errors import UsageError

logger = logging.getLogger(__name__)

type Preset = Literal["desk", "full"]

FULL_SCALE: dict[str, JsonValue] = {
    "data.patch_size": FULL_SCALE_PATCH_SIZE,
    "model.organ_queries": len(FULL_SCALE_ORGAN_CLASSES),
    "model.tumor_queries": len(FULL_SCALE_TUMOR_CLASSES),
    "model.heads": FULL_SCALE_ATTENTION_HEADS,
    "train.epochs_stage1": FULL_SCALE_EPOCHS,
    "train.epochs_stage2": FULL_SCALE_EPOCHS,
    "train.warmup_fraction": FULL_SCALE_WARMUP_EPOCHS / FULL_SCALE_EPOCHS,
    "train.lr_stage1": FULL_SCALE_STAGE1_LR,
    "train.lr_stage2": FULL_SCALE_STAGE2_LR,
}
PRESETS: dict[Preset, dict[str, JsonValue]] = {"desk": {}, "full": FULL_SCALE}


class DataSettings(BaseModel):
    """Synthetic dataset generation."""

    model_config = ConfigDict(extra="forbid")

    patch_size: int = Field(default=32, gt=0)
    n_train: int = Field(default=64, gt=1)
    n_val: int = Field(default=8, ge=0)
    n_test: int = Field(default=16, gt=1)
    unseen_class: str = DESK_UNSEEN_TUMOR
    organ_label_probability: float = Field(default=0.7, gt=0, le=1)
    organ_fraction_min: float = Field(default=0.05, ge=0, lt=1)
    organ_fraction_max: float = Field(default=0.40, gt=0, le=1)
    noise_sigma: float = Field(default=0.04, ge=0)
    placement_attempts: int = Field(default=40, gt=0)
    text_dim: int = Field(default=32, gt=0)

    @model_validator(mode="after")
    def _check_extents(self) -> Self:
        stride = 2 ** (PYRAMID_DEPTH - 1)
        if self.patch_size % stride:
            msg = f"patch_size must be divisible by {stride}"
            raise ValueError(msg)
        if self.organ_fraction_min >= self.organ_fraction_max:
            msg = "organ_fraction_min must be below organ_fraction_max"
            raise ValueError(msg)
        return self


class ModelSettings(BaseModel):
    """Architecture hyperparameters."""

    model_config = ConfigDict(extra="forbid")

    channels: tuple[int, int, int, int] = (16, 32, 64, 128)
    width: int = Field(default=32, gt=0)
    organ_queries: int = Field(default=4, gt=0)
    tumor_queries: int = Field(default=2, gt=0)
    state_dim: int = Field(default=8, gt=0)
    heads: int = Field(default=2, gt=0)
    ssm_direction: Literal["forward", "bidirectional"] = "forward"
    query_ssm: bool = True
    cluster_norm: Literal["sum", "mean"] = "sum"
    guidance_channels: int = Field(default=4, gt=0)
    guidance_source: Literal["self", "deep"] = "self"
    kappa_init: float = Field(default=1.0, gt=0)
    temperature: float = Field(default=0.01, gt=0)
    text_dim: int = Field(default=32, gt=0)
    dtype: Literal["float32", "float64"] = "float32"

    @model_validator(mode="after")
    def _check_heads(self) -> Self:
        if any(width % self.heads for width in (self.width, *self.channels)):
            msg = "every channel width must be divisible by heads"
            raise ValueError(msg)
        return self


class TrainSettings(BaseModel):
    """Optimization and schedule."""

    model_config = ConfigDict(extra="forbid")

    stage: Literal[1, 2] = 1
    seed: int = 0
    epochs_stage1: int = Field(default=30, gt=0)
    epochs_stage2: int = Field(default=20, gt=0)
    warmup_fraction: float = Field(default=0.1, ge=0, lt=1)
    lr_stage1: float = Field(default=2e-3, gt=0)
    lr_stage2: float = Field(default=2e-3, gt=0)
    beta1: float = Field(default=0.9, ge=0, lt=1)
    beta2: float = Field(default=0.999, ge=0, lt=1)
    weight_decay: float = Field(default=1e-5, ge=0)
    adam_eps: float = Field(default=1e-8, gt=0)
    batch_size: int = Field(default=2, gt=0)
    dice_mode: Literal["aggregated", "per_voxel"] = "aggregated"
    organ_tumor_ratio: float = Field(default=1.0, gt=0)
    augment: bool = True
    brightness_shift: float = Field(default=0.1, ge=0)
    gamma_low: float = Field(default=0.8, gt=0)
    gamma_high: float = Field(default=1.25, gt=0)
    max_steps_per_epoch: int | None = Field(default=None, gt=0)

    def epochs(self) -> int:
        """Epoch budget of the configured stage."""
        return self.epochs_stage1 if self.stage == 1 else self.epochs_stage2

    def learning_rate(self) -> float:
        """Peak learning rate of the configured stage."""
        return self.lr_stage1 if self.stage == 1 else self.lr_stage2


class AblationSettings(BaseModel):
    """Component toggles; all on is the full model."""

    model_config = ConfigDict(extra="forbid")

    kmmm: bool = True
    amvp: bool = True
    dqr: bool = True
    text_align: bool = True


class PathSettings(BaseModel):
    """Input and output locations."""

    model_config = ConfigDict(extra="forbid")

    data: Path | None = None
    out: Path = Path("runs/latest")
    init: Path | None = None


class RunConfig(BaseSettings):  # type: ignore[explicit-any]
    """Effective configuration of one run."""

    model_config = SettingsConfigDict(
        env_prefix="DSM_",
        env_nested_delimiter="__",
        env_ignore_empty=True,
        extra="forbid",
    )

    data: DataSettings = DataSettings()
    model: ModelSettings = ModelSettings()
    train: TrainSettings = TrainSettings()
    ablation: AblationSettings = AblationSettings()
    paths: PathSettings = PathSettings()

    def flat(self) -> dict[str, JsonValue]:
        """Dotted-key view of every value."""
        return flatten(self.model_dump(mode="json"))

    def digest(self) -> str:
        """SHA-256 of the canonical JSON dump."""
        canonical = json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def flatten(nested: Mapping[str, JsonValue], prefix: str = "") -> dict[str, JsonValue]:
    """Collapse nested mappings into dotted keys."""
    flat: dict[str, JsonValue] = {}
    for key, value in nested.items():
        dotted = f"{prefix}{key}"
        if isinstance(value, dict):
            flat.update(flatten(value, f"{dotted}."))
        else:
            flat[dotted] = value
    return flat


def unflatten(flat: Mapping[str, JsonValue]) -> dict[str, JsonValue]:
    """Expand dotted keys into nested mappings."""
    nested: dict[str, JsonValue] = {}
    for dotted, value in flat.items():
        *parents, leaf = dotted.split(".")
        cursor = nested
        for part in parents:
            child = cursor.setdefault(part, {})
            if not isinstance(child, dict):
                msg = f"config key {dotted!r} conflicts with a scalar value"
                raise UsageError(msg)
            cursor = child
        cursor[leaf] = value
    return nested


def parse_override(assignment: str) -> tuple[str, JsonValue]:
    """Split ``key=value``; the value is read as JSON when it parses."""
    key, separator, raw = assignment.partition("=")
    if not separator or not key:
        msg = f"override {assignment!r} is not of the form key=value"
        raise UsageError(msg)
    try:
        value: JsonValue = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def load_run_config(
    path: Path | None = None,
    overrides: Mapping[str, JsonValue] | None = None,
    *,
    preset: Preset = "desk",
) -> RunConfig:
    """
    Build the effective config: environment < preset < file < overrides.

    The ``full`` preset restores the full-scale patch, query counts,
    heads, epochs and learning rates; ``desk`` keeps the defaults.
    """
    flat: dict[str, JsonValue] = dict(PRESETS[preset])
    if path is not None:
        try:
            loaded = json.loads(path.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            msg = f"cannot read config {path}: {exc}"
            raise UsageError(msg) from exc
        if not isinstance(loaded, dict):
            msg = f"config {path} must be a JSON object"
            raise UsageError(msg)
        flat.update(flatten(loaded))
    if overrides:
        flat.update(overrides)
    config = RunConfig(**unflatten(flat))  # type: ignore[arg-type]
    logger.debug("effective config digest %s", config.digest())
    return config
