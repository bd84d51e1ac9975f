from pathlib import Path

import numpy as np
import pytest

from dsm.core.provenance import run_info
from dsm.data.manifest import Dataset
from dsm.data.synth import desk_classes
from dsm.errors import ContractError, DataError
from dsm.layers.align import orthonormal_bank
from dsm.tests.utils.helpers import labeled_cube, tiny_config
from dsm.training.evaluate import (
    Prediction,
    evaluate_checkpoint,
    evaluated_classes,
    infer_volume,
    label_map,
    query_classes,
    query_names,
    score_volume,
)
from dsm.training.trainer import Trainer

TUMORS = ["Liver Tumor", "Kidney Tumor", "Colon Tumor"]


def _one_hot_probabilities(columns: list[int], width: int) -> np.ndarray:
    return np.eye(width)[columns]


def test_perfect_prediction_scores_one() -> None:
    classes = desk_classes()
    sample = labeled_cube(classes)
    truth = sample.one_hot()
    positives = truth[[4, 5, 6]].any(axis=0)
    prediction = Prediction(masks=truth, probabilities=None, anomaly=positives.astype(float))
    metrics = score_volume(prediction, sample, classes[1:], TUMORS, "cube", classes[1:])
    assert metrics.dsc == dict.fromkeys(classes[1:], 1.0)
    assert metrics.ood is not None
    assert metrics.ood.auroc == 1.0
    assert metrics.ood.fpr95 == 0.0


def test_aligned_queries_score_the_classes_they_won() -> None:
    classes = desk_classes()
    sample = labeled_cube(classes)
    truth = sample.one_hot()
    # the last trained tumor query segments the unseen class
    masks = truth[[0, 1, 2, 3, 4, 6]]
    probabilities = _one_hot_probabilities([0, 1, 2, 3, 4, 6], len(classes) - 1)
    prediction = Prediction(masks=masks, probabilities=probabilities, anomaly=np.zeros(512))
    bank = orthonormal_bank(classes[1:], 8, seed=0)
    trained = [name for name in classes[1:] if name != "Colon Tumor"]
    assigned = query_names(prediction, bank, trained)
    assert assigned[-1] == "Colon Tumor"
    metrics = score_volume(prediction, sample, classes[1:], TUMORS, "cube", assigned)
    assert metrics.dsc["Colon Tumor"] == 1.0
    assert metrics.dsc["Liver Tumor"] == 1.0
    assert metrics.dsc["Kidney Tumor"] == 0.0
    labels = label_map(prediction, query_classes(prediction, bank, trained))
    assert set(np.unique(labels)) == {0, 1, 2, 3, 4, 5, 7}


def test_permuted_tumor_queries_follow_their_probabilities() -> None:
    classes = desk_classes()
    sample = labeled_cube(classes)
    truth = sample.one_hot()
    masks = truth[[0, 1, 2, 3, 5, 4]]
    probabilities = _one_hot_probabilities([0, 1, 2, 3, 5, 4], len(classes) - 1)
    prediction = Prediction(masks=masks, probabilities=probabilities, anomaly=np.zeros(512))
    bank = orthonormal_bank(classes[1:], 8, seed=0)
    assigned = query_names(prediction, bank, classes[1:6])
    metrics = score_volume(prediction, sample, classes[1:], TUMORS, "cube", assigned)
    assert metrics.dsc["Liver Tumor"] == 1.0
    assert metrics.dsc["Kidney Tumor"] == 1.0
    fixed = score_volume(prediction, sample, classes[1:], TUMORS, "cube", classes[1:6])
    assert fixed.dsc["Liver Tumor"] == 0.0
    assert fixed.dsc["Kidney Tumor"] == 0.0


def test_queries_sharing_a_class_predict_their_union() -> None:
    classes = desk_classes()
    sample = labeled_cube(classes)
    truth = sample.one_hot()
    halves = np.stack([truth[0], truth[0]])
    halves[0, 96:] = 0
    halves[1, :96] = 0
    prediction = Prediction(masks=halves, probabilities=None, anomaly=np.zeros(512))
    metrics = score_volume(prediction, sample, ["Liver"], TUMORS, "cube", ["Liver", "Liver"])
    assert metrics.dsc == {"Liver": 1.0}


def test_assigned_classes_must_cover_every_mask() -> None:
    classes = desk_classes()
    sample = labeled_cube(classes)
    prediction = Prediction(masks=sample.one_hot(), probabilities=None, anomaly=np.zeros(512))
    with pytest.raises(ContractError):
        score_volume(prediction, sample, classes[1:], TUMORS, "cube", ["Liver"])


def test_unlabeled_and_unevaluated_classes_are_skipped() -> None:
    classes = desk_classes()
    sample = labeled_cube(classes)
    sample = type(sample)(sample.image, sample.label, sample.classes, (1, 2))
    prediction = Prediction(masks=sample.one_hot(), probabilities=None, anomaly=np.zeros(512))
    metrics = score_volume(prediction, sample, ["Liver"], TUMORS, "cube", classes[1:])
    assert list(metrics.dsc) == ["Liver"]


def test_constant_anomaly_map_scores_chance() -> None:
    classes = desk_classes()
    sample = labeled_cube(classes)
    prediction = Prediction(masks=sample.one_hot(), probabilities=None, anomaly=np.ones(512))
    metrics = score_volume(prediction, sample, classes[1:], TUMORS, "cube", classes[1:])
    assert metrics.ood is not None
    assert metrics.ood.auroc == pytest.approx(0.5)
    assert metrics.ood.fpr95 == 1.0


def test_label_map_keeps_background_below_threshold() -> None:
    masks = np.array([[0.9, 0.2, 0.1], [0.3, 0.6, 0.4]])
    prediction = Prediction(masks=masks, probabilities=None, anomaly=np.zeros(3))
    np.testing.assert_array_equal(label_map(prediction, [1, 2]), [1, 2, 0])


def test_query_classes_follow_probabilities_or_trained_order() -> None:
    bank = orthonormal_bank(["a", "b", "c"], 4, seed=0)
    fixed = Prediction(masks=np.zeros((2, 4)), probabilities=None, anomaly=np.zeros(4))
    assert query_classes(fixed, bank) == [1, 2]
    assert query_classes(fixed, bank, ["c", "a"]) == [3, 1]
    aligned = Prediction(
        masks=np.zeros((2, 4)),
        probabilities=np.array([[0.1, 0.1, 0.8], [0.7, 0.2, 0.1]]),
        anomaly=np.zeros(4),
    )
    assert query_classes(aligned, bank, ["a", "b"]) == [3, 1]
    with pytest.raises(DataError):
        query_classes(Prediction(masks=np.zeros((4, 4)), probabilities=None, anomaly=np.zeros(4)), bank)
    with pytest.raises(DataError):
        query_classes(fixed, bank, ["a", "z"])


def test_stage1_evaluates_trained_organs_only() -> None:
    classes = list(desk_classes())
    organs = ["Liver", "Kidney", "Spleen", "Colon"]
    assert evaluated_classes(1, organs, classes) == organs
    assert evaluated_classes(2, organs, classes) == classes[1:]


def test_checkpoint_evaluation_on_unseen_split(dataset_dir: Path, dataset: Dataset, tmp_path: Path) -> None:
    config = tiny_config(dataset_dir, tmp_path)
    checkpoint = Trainer(config, dataset, tmp_path).checkpoint(0)
    report = evaluate_checkpoint(checkpoint, dataset, "test_unseen", run_info(config))
    assert report.split == "test_unseen"
    assert len(report.volumes) == len(dataset.split("test_unseen"))
    assert {summary.name for summary in report.classes} <= set(dataset.manifest.organ_classes)
    assert report.ood is not None
    assert 0.0 <= report.ood.auroc_mean <= 1.0


def test_stage2_evaluation_scores_the_unseen_class(dataset_dir: Path, dataset: Dataset, tmp_path: Path) -> None:
    config = tiny_config(dataset_dir, tmp_path, **{"train.stage": 2})
    checkpoint = Trainer(config, dataset, tmp_path).checkpoint(0)
    report = evaluate_checkpoint(checkpoint, dataset, "test_unseen", run_info(config))
    assert report.mean_dsc(dataset.manifest.unseen_classes) is not None


def test_inference_labels_with_bank_classes(dataset_dir: Path, dataset: Dataset, tmp_path: Path) -> None:
    config = tiny_config(dataset_dir, tmp_path)
    checkpoint = Trainer(config, dataset, tmp_path).checkpoint(0)
    bank = dataset.text_bank()
    sample = dataset.volume(dataset.split("test_seen")[0])
    predicted, anomaly = infer_volume(checkpoint, sample, bank)
    assert predicted.classes == ("Background", *bank.names)
    assert int(predicted.label.max()) <= config.model.organ_queries
    assert anomaly.dims == sample.dims
    assert 0.0 <= anomaly.image.min() <= anomaly.image.max() <= 1.0 + 1e-6
