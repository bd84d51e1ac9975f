"""Machine-readable reports written by the command line."""

from pydantic import BaseModel, ConfigDict, Field, JsonValue, computed_field


class RunInfo(BaseModel):
    """Everything needed to reproduce a run."""

    seed: int
    git_describe: str
    config_digest: str
    config: dict[str, JsonValue]


class GradcheckResult(BaseModel):
    """Gradient verification of one operation."""

    op: str
    max_rel_err: float
    tolerance: float

    @computed_field  # type: ignore[prop-decorator]
    @property
    def passed(self) -> bool:
        """Whether the error is within tolerance."""
        return self.max_rel_err < self.tolerance


class GradcheckReport(BaseModel):
    """Gradient verification of a suite of operations."""

    seed: int
    results: list[GradcheckResult]

    @computed_field  # type: ignore[prop-decorator]
    @property
    def passed(self) -> bool:
        """Whether every operation passed."""
        return all(result.passed for result in self.results)


class OodMetrics(BaseModel):
    """Voxel-level out-of-distribution scores of one volume."""

    auroc: float = Field(ge=0, le=1)
    fpr95: float = Field(ge=0, le=1)


class VolumeMetrics(BaseModel):
    """Metrics of a single evaluated volume."""

    path: str
    dsc: dict[str, float]
    ood: OodMetrics | None = None


class ClassSummary(BaseModel):
    """Mean ± standard error of one class over volumes."""

    name: str
    count: int
    dsc_mean: float
    dsc_sem: float


class OodSummary(BaseModel):
    """Mean ± standard error of the out-of-distribution scores."""

    count: int
    auroc_mean: float
    auroc_sem: float
    fpr95_mean: float
    fpr95_sem: float


class EvalReport(BaseModel):
    """Evaluation of a checkpoint on one split."""

    model_config = ConfigDict(extra="forbid")

    run: RunInfo
    split: str
    volumes: list[VolumeMetrics]
    classes: list[ClassSummary]
    ood: OodSummary | None = None

    def mean_dsc(self, names: list[str]) -> float | None:
        """Average class DSC over ``names`` that were evaluated."""
        values = [summary.dsc_mean for summary in self.classes if summary.name in names]
        if not values:
            return None
        return sum(values) / len(values)


class AblationRow(BaseModel):
    """Scores of one ablation variant."""

    variant: str
    flags: dict[str, bool]
    seen_dsc: float | None
    unseen_dsc: float | None
    auroc: float | None
    fpr95: float | None


class AblationReport(BaseModel):
    """Scores of every requested ablation variant, the full model last."""

    run: RunInfo
    rows: list[AblationRow]


class EpochMetrics(BaseModel):
    """Loss, learning rate and validation DSC after one epoch."""

    epoch: int
    loss: float
    lr: float
    val_dsc: float | None = None


class TrainReport(BaseModel):
    """History of one training stage."""

    run: RunInfo
    stage: int
    epochs: list[EpochMetrics]
    best_metric: float | None = None
