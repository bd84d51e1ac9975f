"""
Procedural abdominal-like volumes.

Organs are non-overlapping superellipsoids with smooth intensity
profiles. Each tumor class has its own intensity offset and texture and is
carved strictly inside its host organ. Training samples carry partial
labels: a random subset of organs plus the tumor they contain.
"""

import logging
from collections.abc import Callable
from dataclasses import dataclass

import numpy as np
import numpy.typing as npt
from scipy.ndimage import binary_erosion, gaussian_filter, generate_binary_structure
from tenacity import (
    RetryError,
    after_log,
    before_log,
    retry,
    retry_if_exception_type,
    stop_after_attempt,
)

from dsm.constants import (
    BACKGROUND_CLASS,
    DESK_ORGAN_CLASSES,
    DESK_TUMOR_CLASSES,
    DESK_TUMOR_HOSTS,
)
from dsm.core.config import DataSettings
from dsm.core.seeding import derive_rng
from dsm.data.volume_io import VolumeSample
from dsm.errors import DataError

logger = logging.getLogger(__name__)

type BoolVolume = npt.NDArray[np.bool_]

BACKGROUND_INTENSITY = 0.1
ORGAN_INTENSITIES = {"Liver": 0.55, "Kidney": 0.72, "Spleen": 0.45, "Colon": 0.32}
ORGAN_GRADIENT = 0.05
SEMI_AXIS_RANGE = (0.14, 0.24)
EXPONENT_RANGE = (2.0, 4.0)
TUMOR_RADIUS_RANGE = (1.5, 2.8)
TUMOR_MARGIN = 1
SMOOTHING_SIGMA = 0.7


@dataclass(frozen=True)
class TumorSignature:
    """How a tumor class differs from its host tissue."""

    offset: float
    texture_sigma: float


TUMOR_SIGNATURES = {
    "Liver Tumor": TumorSignature(offset=-0.22, texture_sigma=0.08),
    "Kidney Tumor": TumorSignature(offset=0.18, texture_sigma=0.06),
    "Colon Tumor": TumorSignature(offset=0.30, texture_sigma=0.10),
}


@dataclass(frozen=True)
class SampleSpec:
    """What one generated volume contains and how much of it is annotated."""

    tumors: tuple[str, ...] = ()
    label_all: bool = False
    organs: tuple[str, ...] = DESK_ORGAN_CLASSES


class PlacementError(Exception):
    """A shape could not be placed on this attempt."""


def desk_classes() -> tuple[str, ...]:
    """Background, organs, then tumors."""
    return (BACKGROUND_CLASS, *DESK_ORGAN_CLASSES, *DESK_TUMOR_CLASSES)


def tumor_host(tumor: str) -> str:
    """Organ a tumor class grows in."""
    hosts = dict(zip(DESK_TUMOR_CLASSES, DESK_TUMOR_HOSTS, strict=True))
    if tumor not in hosts:
        msg = f"unknown tumor class {tumor!r}"
        raise DataError(msg)
    return hosts[tumor]


def _retrying[ResultT](attempts: int, place: Callable[..., ResultT]) -> Callable[..., ResultT]:
    return retry(
        stop=stop_after_attempt(attempts),
        retry=retry_if_exception_type(PlacementError),
        before=before_log(logger, logging.DEBUG),
        after=after_log(logger, logging.DEBUG),
    )(place)


def superellipsoid(
    extents: tuple[int, int, int],
    centre: npt.NDArray[np.float64],
    semi_axes: npt.NDArray[np.float64],
    exponent: float,
) -> BoolVolume:
    """Voxels with Σ|x_i − c_i|^e / a_i^e ≤ 1."""
    grids = np.indices(extents, dtype=np.float64)
    level = sum(
        np.abs((grids[axis] - centre[axis]) / semi_axes[axis]) ** exponent for axis in range(3)
    )
    return np.asarray(level <= 1)


def _place_organ(
    rng: np.random.Generator,
    extents: tuple[int, int, int],
    occupied: BoolVolume,
) -> BoolVolume:
    size = extents[0]
    semi_axes = rng.uniform(*SEMI_AXIS_RANGE, size=3) * size
    exponent = float(rng.uniform(*EXPONENT_RANGE))
    low = np.ceil(semi_axes) + 1
    high = np.array(extents) - low
    if (high <= low).any():
        raise PlacementError
    centre = rng.uniform(low, high)
    region = superellipsoid(extents, centre, semi_axes, exponent)
    # one voxel of clearance between organs
    if (region & ~binary_erosion(~occupied, border_value=1)).any() or not region.any():
        raise PlacementError
    return region


def _carve_tumor(rng: np.random.Generator, host: BoolVolume) -> BoolVolume:
    cube = generate_binary_structure(3, 3)
    interior = binary_erosion(host, structure=cube, iterations=TUMOR_MARGIN)
    radius = rng.uniform(*TUMOR_RADIUS_RANGE, size=3)
    core = binary_erosion(interior, structure=cube, iterations=int(np.ceil(radius.max())))
    candidates = np.argwhere(core if core.any() else interior)
    if candidates.size == 0:
        raise PlacementError
    centre = candidates[rng.integers(len(candidates))].astype(np.float64)
    extents = (host.shape[0], host.shape[1], host.shape[2])
    lesion = superellipsoid(extents, centre, radius, 2.0)
    if (lesion & ~interior).any():
        raise PlacementError
    return lesion


def _organ_layout(
    rng: np.random.Generator,
    extents: tuple[int, int, int],
    organs: tuple[str, ...],
    settings: DataSettings,
) -> dict[str, BoolVolume]:
    place = _retrying(settings.placement_attempts, _place_organ)
    occupied = np.zeros(extents, dtype=bool)
    regions = {}
    for organ in organs:
        try:
            region = place(rng, extents, occupied)
        except RetryError as exc:
            raise PlacementError from exc
        regions[organ] = region
        occupied |= region
    fraction = occupied.mean()
    if not settings.organ_fraction_min <= fraction <= settings.organ_fraction_max:
        logger.debug("organ fraction %s outside the configured band", fraction)
        raise PlacementError
    return regions


def _intensity_profile(rng: np.random.Generator, region: BoolVolume, base: float) -> npt.NDArray[np.float64]:
    grids = np.indices(region.shape, dtype=np.float64) / region.shape[0]
    slope = rng.uniform(-ORGAN_GRADIENT, ORGAN_GRADIENT, size=3)
    return base + np.tensordot(slope, grids - 0.5, axes=1)


def _partial_labels(
    rng: np.random.Generator,
    spec: SampleSpec,
    classes: tuple[str, ...],
    settings: DataSettings,
) -> tuple[int, ...]:
    if spec.label_all:
        return tuple(range(1, len(classes)))
    chosen = [organ for organ in spec.organs if rng.random() < settings.organ_label_probability]
    if not chosen:
        chosen = [spec.organs[int(rng.integers(len(spec.organs)))]]
    return tuple(sorted(classes.index(name) for name in (*chosen, *spec.tumors)))


def generate_volume(spec: SampleSpec, seed: int, settings: DataSettings) -> VolumeSample:
    """Deterministic volume for ``(spec, seed)``."""
    classes = desk_classes()
    unknown = [name for name in (*spec.organs, *spec.tumors) if name not in classes]
    if unknown:
        msg = f"classes {unknown} are not in the desk vocabulary"
        raise DataError(msg)
    missing_hosts = [tumor for tumor in spec.tumors if tumor_host(tumor) not in spec.organs]
    if missing_hosts:
        msg = f"tumors {missing_hosts} have no host organ in the volume"
        raise DataError(msg)

    rng = derive_rng(seed)
    extents = (settings.patch_size, settings.patch_size, settings.patch_size)
    layout = _retrying(settings.placement_attempts, _organ_layout)
    carve = _retrying(settings.placement_attempts, _carve_tumor)
    try:
        regions = layout(rng, extents, spec.organs, settings)
        lesions = {tumor: carve(rng, regions[tumor_host(tumor)]) for tumor in spec.tumors}
    except RetryError as exc:
        msg = f"could not place shapes for seed {seed} after {settings.placement_attempts} attempts"
        raise DataError(msg) from exc

    image = np.full(extents, BACKGROUND_INTENSITY)
    label = np.zeros(extents, dtype=np.uint8)
    for organ, region in regions.items():
        profile = _intensity_profile(rng, region, ORGAN_INTENSITIES[organ])
        image[region] = profile[region]
        label[region] = classes.index(organ)
    image = gaussian_filter(image, SMOOTHING_SIGMA)
    for tumor, lesion in lesions.items():
        signature = TUMOR_SIGNATURES[tumor]
        texture = rng.normal(0.0, signature.texture_sigma, size=extents)
        image[lesion] += signature.offset + texture[lesion]
        label[lesion] = classes.index(tumor)
    image += rng.normal(0.0, settings.noise_sigma, size=extents)

    return VolumeSample(
        image=np.clip(image, 0.0, 1.0).astype(np.float32),
        label=label,
        classes=classes,
        labeled_classes=_partial_labels(rng, spec, classes, settings),
    )
