import struct
from pathlib import Path

import numpy as np
import pytest

from dsm.data.volume_io import VolumeSample, read_volume, write_volume
from dsm.errors import DataError
from dsm.tests.utils.helpers import labeled_cube

CLASSES = ("Background", "Liver", "Kidney")


def test_volume_round_trip(tmp_path: Path) -> None:
    sample = labeled_cube(CLASSES)
    path = tmp_path / "cube.dsmvol"
    write_volume(path, sample)
    loaded = read_volume(path)
    np.testing.assert_array_equal(loaded.image, sample.image)
    np.testing.assert_array_equal(loaded.label, sample.label)
    assert loaded.classes == CLASSES
    assert loaded.labeled_classes == (1, 2)


def test_payload_size_must_match_dims(tmp_path: Path) -> None:
    path = tmp_path / "short.dsmvol"
    write_volume(path, labeled_cube(CLASSES))
    path.write_bytes(path.read_bytes()[:-1])
    with pytest.raises(DataError):
        read_volume(path)


def test_wrong_magic_is_refused(tmp_path: Path) -> None:
    path = tmp_path / "other.dsmvol"
    write_volume(path, labeled_cube(CLASSES))
    raw = bytearray(path.read_bytes())
    raw[:4] = struct.pack("4s", b"DSMT")
    path.write_bytes(bytes(raw))
    with pytest.raises(DataError):
        read_volume(path)


def test_label_outside_classes_is_refused() -> None:
    with pytest.raises(DataError):
        VolumeSample(
            image=np.zeros((2, 2, 2), dtype=np.float32),
            label=np.full((2, 2, 2), 3, dtype=np.uint8),
            classes=CLASSES,
            labeled_classes=(1,),
        )


def test_background_cannot_be_labeled() -> None:
    with pytest.raises(DataError):
        VolumeSample(
            image=np.zeros((2, 2, 2), dtype=np.float32),
            label=np.zeros((2, 2, 2), dtype=np.uint8),
            classes=CLASSES,
            labeled_classes=(0,),
        )


def test_one_hot_and_query_rows() -> None:
    sample = labeled_cube(CLASSES, size=4)
    targets = sample.one_hot()
    assert targets.shape == (2, 64)
    np.testing.assert_array_equal(targets.sum(axis=0), (sample.label.reshape(-1) > 0).astype(float))
    assert sample.query_rows() == [0, 1]


def test_class_targets_follow_requested_order() -> None:
    full = labeled_cube(CLASSES, size=4)
    sample = VolumeSample(full.image, full.label, full.classes, labeled_classes=(2,))
    targets, labeled = sample.class_targets(["Kidney", "Liver"])
    np.testing.assert_array_equal(targets, sample.one_hot()[[1, 0]])
    assert labeled == [0]
    with pytest.raises(DataError):
        sample.class_targets(["Spleen"])
