"""Checkpoint evaluation: per-class DSC and voxel-level out-of-distribution scores."""

import logging
from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np
import numpy.typing as npt

from dsm.constants import BACKGROUND_CLASS, BINARIZE_THRESHOLD
from dsm.core.config import RunConfig
from dsm.core.tensor import FloatArray, constant
from dsm.data.manifest import Dataset
from dsm.data.volume_io import VolumeSample
from dsm.errors import ContractError, DataError, UsageError
from dsm.layers.align import TextEmbeddingBank
from dsm.layers.anomaly import anomaly_score, normalize_minmax, upsample_to_volume
from dsm.models import EvalReport, OodMetrics, RunInfo, SplitName, VolumeMetrics
from dsm.network import DsmNetwork
from dsm.training.checkpoint import Checkpoint
from dsm.training.metrics import auroc, dsc_metric, fpr_at_tpr, summarize_classes, summarize_ood

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Prediction:
    """Soft masks per query, class probabilities and the finest anomaly map at full resolution."""

    masks: FloatArray
    probabilities: FloatArray | None
    anomaly: FloatArray


def build_network(config: RunConfig) -> DsmNetwork:
    """Fresh network for ``config``, seeded by the training seed."""
    return DsmNetwork(config.model, config.ablation, config.data.patch_size, config.train.seed)


def restore_network(checkpoint: Checkpoint) -> tuple[DsmNetwork, RunConfig]:
    """Network and run config saved in ``checkpoint``."""
    config = RunConfig.model_validate(checkpoint.config)
    network = build_network(config)
    network.load_state(checkpoint.params)
    return network, config


def predict(
    network: DsmNetwork,
    sample: VolumeSample,
    stage: int,
    bank: TextEmbeddingBank | None = None,
) -> Prediction:
    """Run one volume through the network without recording gradients."""
    volume = constant(sample.image[None], dtype=network.settings.dtype)
    if stage == 1:
        stage1 = network.stage1_forward(volume)
        masks, probabilities = stage1.masks.data, None
    else:
        output = network.stage2_forward(volume, bank)
        stage1 = output.stage1
        masks = output.masks.data
        probabilities = None if output.probabilities is None else output.probabilities.data
    finest = stage1.affinities[-1].data
    pyramid = stage1.pyramid
    score = normalize_minmax(anomaly_score(finest)).reshape(pyramid.features[-1].shape[1:])
    return Prediction(
        masks=masks,
        probabilities=probabilities,
        anomaly=upsample_to_volume(score, pyramid.strides[-1]),
    )


def query_names(
    prediction: Prediction,
    bank: TextEmbeddingBank,
    trained: Sequence[str] = (),
) -> list[str]:
    """
    Class name of every query.

    With class probabilities each query takes its most probable bank entry,
    so classes appended to the bank after training can be won. Otherwise
    query k keeps its trained class, ``trained[k]``, or the k-th bank entry
    when the trained classes are unknown.
    """
    if prediction.probabilities is not None:
        return [bank.names[int(column)] for column in prediction.probabilities.argmax(axis=1)]
    fixed = list(trained) or list(bank.names)
    queries = prediction.masks.shape[0]
    if queries > len(fixed):
        msg = f"{queries} queries but only {len(fixed)} classes to match them with"
        raise DataError(msg)
    return fixed[:queries]


def score_volume(
    prediction: Prediction,
    sample: VolumeSample,
    class_names: Sequence[str],
    tumor_names: Sequence[str],
    path: str,
    assigned: Sequence[str],
) -> VolumeMetrics:
    """
    DSC of every evaluated class present in the truth, plus OOD scores when tumors are present.

    ``assigned`` names the class of every mask row; a class predicts the
    union of its rows and nothing when no row was assigned to it.
    """
    if len(assigned) != prediction.masks.shape[0]:
        msg = f"{len(assigned)} query classes for {prediction.masks.shape[0]} masks"
        raise ContractError(msg)
    truth = sample.one_hot()
    binary = prediction.masks > BINARIZE_THRESHOLD
    owners = np.asarray(assigned)
    dsc = {}
    for row, name in enumerate(sample.classes[1:]):
        if name not in class_names:
            continue
        if row + 1 not in sample.labeled_classes or not truth[row].any():
            continue
        predicted = binary[owners == name].any(axis=0)
        dsc[name] = dsc_metric(predicted, truth[row].astype(bool))

    ood = None
    tumor_rows = [row for row, name in enumerate(sample.classes[1:]) if name in tumor_names]
    positives = truth[tumor_rows].any(axis=0) if tumor_rows else np.zeros(truth.shape[1], dtype=bool)
    if positives.any() and not positives.all():
        scores = prediction.anomaly.reshape(-1)
        ood = OodMetrics(auroc=auroc(scores, positives), fpr95=fpr_at_tpr(scores, positives))
    return VolumeMetrics(path=path, dsc=dsc, ood=ood)


def evaluated_classes(stage: int, trained: Sequence[str], classes: Sequence[str]) -> list[str]:
    """Trained classes after the organ stage; every foreground class after the tumor stage."""
    if stage == 1:
        return list(trained)
    return [name for name in classes if name != BACKGROUND_CLASS]


def evaluate_network(
    network: DsmNetwork,
    stage: int,
    dataset: Dataset,
    split: SplitName,
    trained: Sequence[str],
) -> list[VolumeMetrics]:
    """Score every volume of ``split`` against the full dataset vocabulary."""
    entries = dataset.split(split)
    if not entries:
        msg = f"split {split} has no volumes"
        raise UsageError(msg)
    bank = dataset.text_bank()
    manifest = dataset.manifest
    names = evaluated_classes(stage, trained, manifest.classes)
    results = []
    for entry in entries:
        sample = dataset.volume(entry)
        prediction = predict(network, sample, stage, bank)
        assigned = query_names(prediction, bank, trained)
        results.append(score_volume(prediction, sample, names, manifest.tumor_classes, entry.path, assigned))
    return results


def evaluate_checkpoint(
    checkpoint: Checkpoint,
    dataset: Dataset,
    split: SplitName,
    run: RunInfo,
) -> EvalReport:
    """Evaluation report of ``checkpoint`` on one split."""
    network, config = restore_network(checkpoint)
    trained = list(checkpoint.query_classes) or dataset.manifest.training_classes()
    if checkpoint.stage == 1:
        trained = trained[: config.model.organ_queries]
    volumes = evaluate_network(network, checkpoint.stage, dataset, split, trained)
    report = EvalReport(
        run=run,
        split=split,
        volumes=volumes,
        classes=summarize_classes(volumes),
        ood=summarize_ood(volumes),
    )
    logger.info("evaluated %s volumes of %s", len(volumes), split)
    return report


def label_map(
    prediction: Prediction,
    query_classes: list[int],
) -> npt.NDArray[np.uint8]:
    """Class index per voxel: the winning query's class, background where no mask exceeds 0.5."""
    winners = prediction.masks.argmax(axis=0)
    confident = prediction.masks.max(axis=0) >= BINARIZE_THRESHOLD
    classes = np.asarray(query_classes, dtype=np.uint8)[winners]
    return np.where(confident, classes, 0).astype(np.uint8)


def query_classes(
    prediction: Prediction,
    bank: TextEmbeddingBank,
    trained: Sequence[str] = (),
) -> list[int]:
    """Class index of every query in a ``(Background, *bank.names)`` vocabulary."""
    names = query_names(prediction, bank, trained)
    missing = sorted(set(names) - set(bank.names))
    if missing:
        msg = f"text bank has no entry for trained classes {missing}"
        raise DataError(msg)
    return [bank.names.index(name) + 1 for name in names]


def infer_volume(
    checkpoint: Checkpoint,
    sample: VolumeSample,
    bank: TextEmbeddingBank,
) -> tuple[VolumeSample, VolumeSample]:
    """Predicted label volume and the finest anomaly map stored as an image."""
    network, _ = restore_network(checkpoint)
    prediction = predict(network, sample, checkpoint.stage, bank)
    classes = (BACKGROUND_CLASS, *bank.names)
    owners = query_classes(prediction, bank, checkpoint.query_classes)
    labels = label_map(prediction, owners).reshape(sample.dims)
    predicted = VolumeSample(
        image=sample.image,
        label=labels,
        classes=classes,
        labeled_classes=tuple(range(1, len(classes))),
    )
    anomaly = VolumeSample(
        image=prediction.anomaly.reshape(sample.dims).astype(np.float32),
        label=np.zeros(sample.dims, dtype=np.uint8),
        classes=(BACKGROUND_CLASS,),
        labeled_classes=(),
    )
    logger.info("labeled %s foreground voxels", int((labels > 0).sum()))
    return predicted, anomaly
