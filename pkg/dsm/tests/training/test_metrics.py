import numpy as np
import pytest

from dsm.errors import DataError
from dsm.models import OodMetrics, VolumeMetrics
from dsm.training.metrics import auroc, dsc_metric, fpr_at_tpr, summarize_classes, summarize_ood


def test_dsc_of_two_empty_masks_is_one() -> None:
    empty = np.zeros((2, 2, 2), dtype=bool)
    assert dsc_metric(empty, empty) == 1.0


def test_dsc_of_partial_overlap() -> None:
    prediction = np.array([True, True, False, False])
    truth = np.array([True, False, True, False])
    assert dsc_metric(prediction, truth) == pytest.approx(0.5)


def test_dsc_of_empty_prediction_against_lesion_is_zero() -> None:
    assert dsc_metric(np.zeros(4, dtype=bool), np.ones(4, dtype=bool)) == 0.0


def test_dsc_rejects_shape_mismatch() -> None:
    with pytest.raises(DataError):
        dsc_metric(np.zeros(3, dtype=bool), np.zeros(4, dtype=bool))


def test_auroc_of_perfect_ranking() -> None:
    assert auroc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0


def test_auroc_counts_ties_half() -> None:
    assert auroc(np.full(6, 0.3), [0, 1, 0, 1, 0, 1]) == pytest.approx(0.5)


def test_auroc_matches_pair_counting(rng: np.random.Generator) -> None:
    scores = rng.integers(0, 5, size=40).astype(float)
    labels = rng.random(40) < 0.4
    positives = scores[labels][:, None]
    negatives = scores[~labels][None, :]
    expected = ((positives > negatives) + 0.5 * (positives == negatives)).mean()
    assert auroc(scores, labels) == pytest.approx(expected)


def test_fpr95_hand_case() -> None:
    assert fpr_at_tpr([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == pytest.approx(0.5)


def test_fpr95_of_separable_scores_is_zero() -> None:
    assert fpr_at_tpr([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 0.0


def _fpr_over_all_thresholds(scores: np.ndarray, labels: np.ndarray, target: float) -> float:
    best = 1.0
    for threshold in [*np.unique(scores), np.inf]:
        predicted = scores >= threshold
        tpr = (predicted & labels).sum() / labels.sum()
        fpr = (predicted & ~labels).sum() / (~labels).sum()
        if tpr >= target:
            best = min(best, fpr)
    return float(best)


def test_fpr95_matches_exhaustive_thresholds(rng: np.random.Generator) -> None:
    for case in range(100):
        labels = rng.random(50) < 0.3
        labels[:2] = [True, False]
        scores = rng.integers(0, 12, size=50) / 12 if case % 2 else rng.random(50) + 0.4 * labels
        expected = _fpr_over_all_thresholds(scores, labels, 0.95)
        assert fpr_at_tpr(scores, labels.astype(int)) == pytest.approx(expected)


@pytest.mark.parametrize("labels", [[0, 0, 0], [1, 1, 1]])
def test_roc_metrics_need_both_classes(labels: list[int]) -> None:
    with pytest.raises(DataError):
        auroc([0.1, 0.5, 0.9], labels)
    with pytest.raises(DataError):
        fpr_at_tpr([0.1, 0.5, 0.9], labels)


def test_class_summary_reports_mean_and_standard_error() -> None:
    volumes = [
        VolumeMetrics(path="a", dsc={"Liver": 0.8, "Kidney": 0.5}),
        VolumeMetrics(path="b", dsc={"Liver": 0.6}),
    ]
    summaries = {summary.name: summary for summary in summarize_classes(volumes)}
    assert summaries["Liver"].count == 2
    assert summaries["Liver"].dsc_mean == pytest.approx(0.7)
    assert summaries["Liver"].dsc_sem == pytest.approx(np.std([0.8, 0.6], ddof=1) / np.sqrt(2))
    assert summaries["Kidney"].dsc_sem == 0.0


def test_class_summary_of_nothing_is_empty() -> None:
    assert summarize_classes([]) == []


def test_ood_summary_skips_volumes_without_scores() -> None:
    volumes = [
        VolumeMetrics(path="a", dsc={}, ood=OodMetrics(auroc=0.9, fpr95=0.2)),
        VolumeMetrics(path="b", dsc={}),
        VolumeMetrics(path="c", dsc={}, ood=OodMetrics(auroc=0.7, fpr95=0.4)),
    ]
    summary = summarize_ood(volumes)
    assert summary is not None
    assert summary.count == 2
    assert summary.auroc_mean == pytest.approx(0.8)
    assert summary.fpr95_mean == pytest.approx(0.3)


def test_ood_summary_of_no_scores_is_none() -> None:
    assert summarize_ood([VolumeMetrics(path="a", dsc={"Liver": 1.0})]) is None
