"""Seeded dataset generation into splits, with the manifest that indexes them."""

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from pydantic import ValidationError

from dsm.constants import DESK_ORGAN_CLASSES, DESK_TUMOR_CLASSES, MANIFEST_NAME, TEXT_BANK_NAME, VOLUME_SUFFIX
from dsm.core.config import DataSettings
from dsm.data.synth import SampleSpec, desk_classes, generate_volume
from dsm.data.volume_io import VolumeSample, read_volume, write_volume
from dsm.errors import DataError
from dsm.layers.align import TextEmbeddingBank, load_text_bank, orthonormal_bank, write_text_bank
from dsm.models import SPLIT_NAMES, TRAINING_SPLITS, DatasetManifest, SampleEntry, SplitName

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SplitPlan:
    """Requested volumes of one split."""

    name: SplitName
    specs: tuple[SampleSpec, ...]


def sample_seed(seed: int, split: SplitName, position: int) -> int:
    """Per-sample seed derived from the dataset seed."""
    state = np.random.SeedSequence([seed, SPLIT_NAMES.index(split), position]).generate_state(1)
    return int(state[0])


def _cycle(tumors: list[str], count: int, *, label_all: bool) -> tuple[SampleSpec, ...]:
    return tuple(SampleSpec(tumors=(tumors[i % len(tumors)],), label_all=label_all) for i in range(count))


def plan_splits(settings: DataSettings) -> list[SplitPlan]:
    """Organ-only train1, seen tumors in train2/val/test_seen, the unseen class in test_unseen."""
    if settings.unseen_class not in DESK_TUMOR_CLASSES:
        msg = f"unseen class {settings.unseen_class!r} is not a tumor class"
        raise DataError(msg)
    seen = [name for name in DESK_TUMOR_CLASSES if name != settings.unseen_class]
    if not seen:
        msg = "every tumor class is unseen; nothing left to train on"
        raise DataError(msg)
    organ_only = settings.n_train // 2
    seen_tests = settings.n_test // 2
    return [
        SplitPlan("train1", tuple(SampleSpec() for _ in range(organ_only))),
        SplitPlan("train2", _cycle(seen, settings.n_train - organ_only, label_all=False)),
        SplitPlan("val", _cycle(seen, settings.n_val, label_all=True)),
        SplitPlan("test_seen", _cycle(seen, seen_tests, label_all=True)),
        SplitPlan("test_unseen", _cycle([settings.unseen_class], settings.n_test - seen_tests, label_all=True)),
    ]


def check_zero_leakage(manifest: DatasetManifest, samples: dict[str, VolumeSample]) -> None:
    """Raise if an unseen class has a voxel in a training split."""
    unseen = [manifest.classes.index(name) for name in manifest.unseen_classes]
    for entry in manifest.samples:
        if entry.split not in TRAINING_SPLITS:
            continue
        if np.isin(samples[entry.path].label, unseen).any():
            msg = f"training volume {entry.path} contains an unseen class"
            raise DataError(msg)


def build_manifest(settings: DataSettings, seed: int, out: Path) -> DatasetManifest:
    """Generate every split under ``out`` and write the manifest and text bank."""
    classes = desk_classes()
    bank = orthonormal_bank(classes[1:], settings.text_dim, seed)
    write_text_bank(out / TEXT_BANK_NAME, bank)

    entries = []
    generated: dict[str, VolumeSample] = {}
    for plan in plan_splits(settings):
        for position, spec in enumerate(plan.specs):
            volume_seed = sample_seed(seed, plan.name, position)
            sample = generate_volume(spec, volume_seed, settings)
            relative = f"{plan.name}/{position:04d}{VOLUME_SUFFIX}"
            write_volume(out / relative, sample)
            generated[relative] = sample
            tumor = spec.tumors[0] if spec.tumors else None
            entries.append(SampleEntry(path=relative, split=plan.name, seed=volume_seed, tumor=tumor))
        logger.info("generated %s volumes for split %s", len(plan.specs), plan.name)

    manifest = DatasetManifest(
        seed=seed,
        classes=list(classes),
        organ_classes=list(DESK_ORGAN_CLASSES),
        tumor_classes=list(DESK_TUMOR_CLASSES),
        unseen_classes=[settings.unseen_class],
        text_bank=TEXT_BANK_NAME,
        generator=settings.model_dump(mode="json"),
        samples=entries,
    )
    check_zero_leakage(manifest, generated)
    write_manifest(out / MANIFEST_NAME, manifest)
    return manifest


def write_manifest(path: Path, manifest: DatasetManifest) -> None:
    """Write the manifest as indented JSON."""
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(manifest.model_dump_json(indent=2), encoding="utf-8")


def load_manifest(path: Path) -> DatasetManifest:
    """Read and validate a manifest; a directory means its ``manifest.json``."""
    if path.is_dir():
        path /= MANIFEST_NAME
    try:
        return DatasetManifest.model_validate_json(path.read_bytes())
    except OSError as exc:
        msg = f"cannot read manifest {path}: {exc.strerror}"
        raise DataError(msg) from exc
    except ValidationError as exc:
        msg = f"malformed manifest {path}: {exc.error_count()} errors"
        raise DataError(msg) from exc


@dataclass(frozen=True)
class Dataset:
    """A manifest together with the directory its paths are relative to."""

    root: Path
    manifest: DatasetManifest

    @classmethod
    def open(cls, path: Path) -> "Dataset":
        """Load the dataset whose manifest lives in or at ``path``."""
        root = path if path.is_dir() else path.parent
        return cls(root=root, manifest=load_manifest(path))

    def volume(self, entry: SampleEntry) -> VolumeSample:
        """Read one sample; its classes must match the manifest."""
        sample = read_volume(self.root / entry.path)
        if list(sample.classes) != self.manifest.classes:
            msg = f"{entry.path} has classes {sample.classes}, manifest has {self.manifest.classes}"
            raise DataError(msg)
        return sample

    def split(self, name: SplitName) -> list[SampleEntry]:
        """Entries of one split."""
        return self.manifest.split(name)

    def text_bank(self) -> TextEmbeddingBank:
        """The dataset's full class bank."""
        return load_text_bank(self.root / self.manifest.text_bank)
