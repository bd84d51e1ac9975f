import numpy as np
import pytest

from dsm.constants import MASK_THRESHOLD
from dsm.errors import ContractError
from dsm.layers.anomaly import anomaly_score, mask_prompt, normalize_minmax, open_mask, upsample_to_volume


def test_anomaly_is_negated_best_response() -> None:
    scores = np.array([[1.0, -2.0, 0.5], [0.0, -1.0, 3.0]])
    np.testing.assert_array_equal(anomaly_score(scores), [-1.0, 1.0, -3.0])


def test_normalized_map_spans_unit_interval(rng: np.random.Generator) -> None:
    normalized = normalize_minmax(rng.standard_normal(50))
    assert normalized.min() == 0.0
    assert normalized.max() == 1.0


def test_constant_map_opens_everything() -> None:
    normalized = normalize_minmax(np.full(7, 2.5))
    np.testing.assert_array_equal(normalized, np.ones(7))
    np.testing.assert_array_equal(mask_prompt(normalized), np.zeros(7))


def test_mask_values_are_zero_or_negative_infinity(rng: np.random.Generator) -> None:
    normalized = normalize_minmax(rng.standard_normal(40))
    mask = mask_prompt(normalized)
    assert set(np.unique(mask)) <= {0.0, -np.inf}
    np.testing.assert_array_equal(mask == 0, normalized > MASK_THRESHOLD)


def test_mask_is_never_fully_closed() -> None:
    mask = mask_prompt(np.full(5, MASK_THRESHOLD))
    np.testing.assert_array_equal(mask, np.zeros(5))


def test_open_mask() -> None:
    mask = open_mask(6, "float32")
    assert mask.dtype == np.float32
    assert not mask.any()


def test_upsample_reaches_full_resolution(rng: np.random.Generator) -> None:
    score = rng.random((2, 2, 2))
    volume = upsample_to_volume(score, 4)
    assert volume.shape == (8, 8, 8)
    assert volume.min() >= score.min() - 1e-12
    assert volume.max() <= score.max() + 1e-12


def test_upsample_of_stride_one_is_identity(rng: np.random.Generator) -> None:
    score = rng.random((3, 3, 3))
    np.testing.assert_array_equal(upsample_to_volume(score, 1), score)


def test_upsample_rejects_odd_stride() -> None:
    with pytest.raises(ContractError):
        upsample_to_volume(np.zeros((2, 2, 2)), 3)
