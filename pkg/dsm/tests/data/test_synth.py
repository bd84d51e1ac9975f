import numpy as np
import pytest

from dsm.constants import DESK_ORGAN_CLASSES
from dsm.core.config import DataSettings
from dsm.data.synth import SampleSpec, desk_classes, generate_volume, superellipsoid, tumor_host
from dsm.errors import DataError


def test_vocabulary_order() -> None:
    assert desk_classes() == (
        "Background",
        "Liver",
        "Kidney",
        "Spleen",
        "Colon",
        "Liver Tumor",
        "Kidney Tumor",
        "Colon Tumor",
    )


def test_tumor_hosts() -> None:
    assert tumor_host("Kidney Tumor") == "Kidney"
    with pytest.raises(DataError):
        tumor_host("Lung Tumor")


def test_superellipsoid_contains_centre_and_respects_axes() -> None:
    region = superellipsoid((9, 9, 9), np.array([4.0, 4.0, 4.0]), np.array([2.0, 3.0, 1.0]), 2.0)
    assert region[4, 4, 4]
    assert region[4, 7, 4]
    assert not region[4, 4, 6]


def test_same_seed_same_volume(data_settings: DataSettings) -> None:
    spec = SampleSpec(tumors=("Liver Tumor",))
    first = generate_volume(spec, 11, data_settings)
    second = generate_volume(spec, 11, data_settings)
    np.testing.assert_array_equal(first.image, second.image)
    np.testing.assert_array_equal(first.label, second.label)
    assert first.labeled_classes == second.labeled_classes


def test_different_seeds_differ(data_settings: DataSettings) -> None:
    first = generate_volume(SampleSpec(), 1, data_settings)
    second = generate_volume(SampleSpec(), 2, data_settings)
    assert not np.array_equal(first.label, second.label)


def test_volume_contents(data_settings: DataSettings) -> None:
    sample = generate_volume(SampleSpec(tumors=("Kidney Tumor",), label_all=True), 5, data_settings)
    classes = desk_classes()
    present = set(np.unique(sample.label).tolist())
    assert {classes.index(organ) for organ in DESK_ORGAN_CLASSES} <= present
    assert classes.index("Kidney Tumor") in present
    assert classes.index("Liver Tumor") not in present
    assert sample.image.dtype == np.float32
    assert 0.0 <= sample.image.min() <= sample.image.max() <= 1.0
    assert sample.labeled_classes == tuple(range(1, len(classes)))


def test_tumor_lies_inside_its_host(data_settings: DataSettings) -> None:
    classes = desk_classes()
    spec = SampleSpec(tumors=("Liver Tumor",), label_all=True, organs=("Liver", "Kidney"))
    sample = generate_volume(spec, 3, data_settings)
    lesion = sample.label == classes.index("Liver Tumor")
    assert lesion.any()
    neighbours = np.zeros_like(lesion)
    for axis in range(3):
        for step in (-1, 1):
            neighbours |= np.roll(lesion, step, axis=axis)
    ring = sample.label[neighbours & ~lesion]
    assert set(ring.tolist()) == {classes.index("Liver")}


def test_partial_labels_always_keep_an_organ_and_the_tumor(data_settings: DataSettings) -> None:
    classes = desk_classes()
    for seed in range(5):
        sample = generate_volume(SampleSpec(tumors=("Liver Tumor",)), seed, data_settings)
        labeled = {classes[index] for index in sample.labeled_classes}
        assert "Liver Tumor" in labeled
        assert labeled & set(DESK_ORGAN_CLASSES)


def test_tumor_without_host_is_rejected(data_settings: DataSettings) -> None:
    with pytest.raises(DataError):
        generate_volume(SampleSpec(tumors=("Colon Tumor",), organs=("Liver",)), 0, data_settings)


def test_unknown_class_is_rejected(data_settings: DataSettings) -> None:
    with pytest.raises(DataError):
        generate_volume(SampleSpec(organs=("Heart",)), 0, data_settings)


def test_impossible_layout_is_data_error() -> None:
    cramped = DataSettings(patch_size=8, placement_attempts=2, organ_fraction_min=0.95, organ_fraction_max=0.99)
    with pytest.raises(DataError):
        generate_volume(SampleSpec(), 0, cramped)


def test_organ_fraction_stays_in_band(data_settings: DataSettings) -> None:
    for seed in range(3):
        sample = generate_volume(SampleSpec(), seed, data_settings)
        fraction = float((sample.label > 0).mean())
        assert data_settings.organ_fraction_min <= fraction <= data_settings.organ_fraction_max
