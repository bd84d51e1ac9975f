"""``.dsmvol`` volumes: a float32 image with a u8 label map."""

import logging
from collections.abc import Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import numpy.typing as npt

from dsm.constants import VOLUME_MAGIC
from dsm.core.container import blob, read_container, take_blob, write_container
from dsm.errors import DataError
from dsm.models import VolumeHeader

logger = logging.getLogger(__name__)

SPATIAL_RANK = 3


@dataclass(frozen=True)
class VolumeSample:
    """One image with its class-index labels and the classes annotated in it."""

    image: npt.NDArray[np.float32]
    label: npt.NDArray[np.uint8]
    classes: tuple[str, ...]
    labeled_classes: tuple[int, ...]

    def __post_init__(self) -> None:
        """Validate extents and indices."""
        if self.image.ndim != SPATIAL_RANK or self.image.shape != self.label.shape:
            msg = f"image {self.image.shape} and label {self.label.shape} must be equal 3-D extents"
            raise DataError(msg)
        if self.label.size and int(self.label.max()) >= len(self.classes):
            msg = f"label index {int(self.label.max())} outside {len(self.classes)} classes"
            raise DataError(msg)
        if any(index <= 0 or index >= len(self.classes) for index in self.labeled_classes):
            msg = f"labeled classes {self.labeled_classes} must be foreground indices"
            raise DataError(msg)

    @property
    def dims(self) -> tuple[int, int, int]:
        """Extents D, H, W."""
        depth, height, width = self.image.shape
        return depth, height, width

    def one_hot(self) -> npt.NDArray[np.float64]:
        """K×V targets for the foreground classes 1..K in class order."""
        flat = self.label.reshape(-1)
        foreground = np.arange(1, len(self.classes))
        return (flat[None, :] == foreground[:, None]).astype(np.float64)

    def query_rows(self) -> list[int]:
        """Labeled classes as zero-based foreground rows."""
        return [index - 1 for index in self.labeled_classes]

    def class_targets(self, names: Sequence[str]) -> tuple[npt.NDArray[np.float64], list[int]]:
        """Target rows for ``names`` in the given order, and which of those rows are labeled."""
        missing = [name for name in names if name not in self.classes[1:]]
        if missing:
            msg = f"volume has no class {missing}"
            raise DataError(msg)
        positions = [self.classes.index(name) for name in names]
        targets = self.one_hot()[[position - 1 for position in positions]]
        labeled = [row for row, position in enumerate(positions) if position in self.labeled_classes]
        return targets, labeled


def write_volume(path: Path, sample: VolumeSample) -> None:
    """Write ``sample`` as a ``.dsmvol`` file."""
    header = VolumeHeader(
        dims=list(sample.dims),
        classes=list(sample.classes),
        labeled_classes=list(sample.labeled_classes),
    )
    write_container(
        path,
        VOLUME_MAGIC,
        header,
        [blob(sample.image.astype(np.float32)), blob(sample.label.astype(np.uint8))],
    )


def read_volume(path: Path) -> VolumeSample:
    """Read a ``.dsmvol`` file; the payload must hold exactly one image and one label map."""
    header, payload = read_container(path, VOLUME_MAGIC, VolumeHeader)
    if any(extent <= 0 for extent in header.dims):
        msg = f"volume dims {header.dims} must be positive"
        raise DataError(msg)
    voxels = int(np.prod(header.dims))
    expected = voxels * (np.dtype(np.float32).itemsize + np.dtype(np.uint8).itemsize)
    if len(payload) != expected:
        msg = f"volume payload has {len(payload)} bytes, dims {header.dims} need {expected}"
        raise DataError(msg)
    image = take_blob(payload, 0, header.dims, np.float32)
    label = take_blob(payload, voxels * np.dtype(np.float32).itemsize, header.dims, np.uint8)
    logger.debug("read volume %s with dims %s", path, header.dims)
    return VolumeSample(
        image=image,
        label=label,
        classes=tuple(header.classes),
        labeled_classes=tuple(header.labeled_classes),
    )
