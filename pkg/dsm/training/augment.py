"""On-the-fly augmentation of training volumes."""

import numpy as np
import numpy.typing as npt

from dsm.core.config import TrainSettings
from dsm.data.volume_io import VolumeSample

SPATIAL_AXES = (0, 1, 2)


def flip_and_rotate[ScalarT: np.generic](
    volume: npt.NDArray[ScalarT],
    flips: tuple[bool, bool, bool],
    quarter_turns: int,
    plane: tuple[int, int],
) -> npt.NDArray[ScalarT]:
    """Axis flips followed by ``quarter_turns`` 90° rotations in ``plane``."""
    for axis, flip in zip(SPATIAL_AXES, flips, strict=True):
        if flip:
            volume = np.flip(volume, axis=axis)
    return np.ascontiguousarray(np.rot90(volume, k=quarter_turns, axes=plane))


def adjust_intensity(
    image: npt.NDArray[np.float32],
    shift: float,
    gamma: float,
) -> npt.NDArray[np.float32]:
    """Gamma scaling then an additive brightness shift, clipped to [0, 1]."""
    scaled = np.power(np.clip(image, 0.0, 1.0), gamma) + shift
    return np.clip(scaled, 0.0, 1.0).astype(np.float32)


def augment_sample(sample: VolumeSample, rng: np.random.Generator, settings: TrainSettings) -> VolumeSample:
    """Apply one random geometric transform to image and label, intensity changes to the image only."""
    flips = (bool(rng.random() < 0.5), bool(rng.random() < 0.5), bool(rng.random() < 0.5))  # noqa: PLR2004
    quarter_turns = int(rng.integers(4))
    first, second = rng.choice(SPATIAL_AXES, size=2, replace=False)
    plane = (int(first), int(second))
    shift = float(rng.uniform(-settings.brightness_shift, settings.brightness_shift))
    gamma = float(np.exp(rng.uniform(np.log(settings.gamma_low), np.log(settings.gamma_high))))
    image = flip_and_rotate(sample.image, flips, quarter_turns, plane)
    return VolumeSample(
        image=adjust_intensity(image, shift, gamma),
        label=flip_and_rotate(sample.label, flips, quarter_turns, plane),
        classes=sample.classes,
        labeled_classes=sample.labeled_classes,
    )
