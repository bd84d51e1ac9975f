"""Overlap and out-of-distribution metrics, and their aggregation over volumes."""

import logging
from collections.abc import Sequence

import numpy as np
import numpy.typing as npt
import pandas as pd
from sklearn.metrics import roc_auc_score, roc_curve

from dsm.constants import TPR_TARGET
from dsm.errors import DataError
from dsm.models import ClassSummary, OodSummary, VolumeMetrics

logger = logging.getLogger(__name__)

type BoolArray = npt.NDArray[np.bool_]


def dsc_metric(prediction: BoolArray, truth: BoolArray) -> float:
    """2|P∩T|/(|P|+|T|); two empty masks score 1."""
    if prediction.shape != truth.shape:
        msg = f"prediction {prediction.shape} and truth {truth.shape} differ"
        raise DataError(msg)
    size = int(prediction.sum()) + int(truth.sum())
    if size == 0:
        return 1.0
    return 2 * int(np.logical_and(prediction, truth).sum()) / size


def _binary_labels(scores: npt.ArrayLike, labels: npt.ArrayLike) -> tuple[npt.NDArray[np.float64], BoolArray]:
    flat_scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    flat_labels = np.asarray(labels).reshape(-1).astype(bool)
    if flat_scores.shape != flat_labels.shape:
        msg = f"{flat_scores.size} scores for {flat_labels.size} labels"
        raise DataError(msg)
    positives = int(flat_labels.sum())
    if positives in {0, flat_labels.size}:
        msg = "ROC metrics need at least one positive and one negative voxel"
        raise DataError(msg)
    return flat_scores, flat_labels


def auroc(scores: npt.ArrayLike, labels: npt.ArrayLike) -> float:
    """Probability that a positive outscores a negative, ties counting half."""
    flat_scores, flat_labels = _binary_labels(scores, labels)
    return float(roc_auc_score(flat_labels, flat_scores))


def fpr_at_tpr(scores: npt.ArrayLike, labels: npt.ArrayLike, tpr_target: float = TPR_TARGET) -> float:
    """Smallest false-positive rate over thresholds reaching the target true-positive rate."""
    flat_scores, flat_labels = _binary_labels(scores, labels)
    fpr, tpr, _ = roc_curve(flat_labels, flat_scores, drop_intermediate=False)
    return float(fpr[tpr >= tpr_target].min())


def summarize_classes(volumes: Sequence[VolumeMetrics]) -> list[ClassSummary]:
    """Mean ± standard error of every class DSC over the volumes that score it."""
    records = [
        {"name": name, "dsc": value}
        for volume in volumes
        for name, value in volume.dsc.items()
    ]
    if not records:
        return []
    grouped = pd.DataFrame.from_records(records).groupby("name", sort=False)["dsc"]
    table = grouped.agg(["count", "mean", "sem"]).fillna({"sem": 0.0})
    return [
        ClassSummary(
            name=str(name),
            count=int(row["count"]),
            dsc_mean=float(row["mean"]),
            dsc_sem=float(row["sem"]),
        )
        for name, row in table.iterrows()
    ]


def summarize_ood(volumes: Sequence[VolumeMetrics]) -> OodSummary | None:
    """Mean ± standard error of AUROC and FPR95 over volumes that carry them."""
    frame = pd.DataFrame.from_records(
        [volume.ood.model_dump() for volume in volumes if volume.ood is not None],
        columns=["auroc", "fpr95"],
    )
    if frame.empty:
        return None
    sem = frame.sem().fillna(0.0)
    return OodSummary(
        count=len(frame),
        auroc_mean=float(frame["auroc"].mean()),
        auroc_sem=float(sem["auroc"]),
        fpr95_mean=float(frame["fpr95"].mean()),
        fpr95_sem=float(sem["fpr95"]),
    )
