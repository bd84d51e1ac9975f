"""Data models for headers, manifests and reports."""

# Container headers
from dsm.models.header_models import (
    CheckpointHeader,
    TensorEntry,
    TextBankHeader,
    VolumeHeader,
)

# Dataset manifest
from dsm.models.manifest_models import (
    SPLIT_NAMES,
    TRAINING_SPLITS,
    DatasetManifest,
    SampleEntry,
    SplitName,
)

# Reports
from dsm.models.report_models import (
    AblationReport,
    AblationRow,
    ClassSummary,
    EpochMetrics,
    EvalReport,
    GradcheckReport,
    GradcheckResult,
    OodMetrics,
    OodSummary,
    RunInfo,
    TrainReport,
    VolumeMetrics,
)

__all__ = [
    # Container headers
    "CheckpointHeader",
    "TensorEntry",
    "TextBankHeader",
    "VolumeHeader",
    # Dataset manifest
    "SPLIT_NAMES",
    "TRAINING_SPLITS",
    "DatasetManifest",
    "SampleEntry",
    "SplitName",
    # Reports
    "AblationReport",
    "AblationRow",
    "ClassSummary",
    "EpochMetrics",
    "EvalReport",
    "GradcheckReport",
    "GradcheckResult",
    "OodMetrics",
    "OodSummary",
    "RunInfo",
    "TrainReport",
    "VolumeMetrics",
]
