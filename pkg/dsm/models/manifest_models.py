"""Dataset manifest models."""

from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, JsonValue

type SplitName = Literal["train1", "train2", "val", "test_seen", "test_unseen"]

SPLIT_NAMES: tuple[SplitName, ...] = ("train1", "train2", "val", "test_seen", "test_unseen")
TRAINING_SPLITS: tuple[SplitName, ...] = ("train1", "train2")


class SampleEntry(BaseModel):
    """One generated volume and the split it belongs to."""

    model_config = ConfigDict(extra="forbid")

    path: str
    split: SplitName
    seed: int
    tumor: str | None = None


class DatasetManifest(BaseModel):
    """Index of a generated dataset."""

    model_config = ConfigDict(extra="forbid")

    seed: int
    classes: list[str] = Field(min_length=2)
    organ_classes: list[str]
    tumor_classes: list[str]
    unseen_classes: list[str] = Field(min_length=1)
    text_bank: str
    generator: dict[str, JsonValue] = Field(default_factory=dict)
    samples: list[SampleEntry]

    def split(self, name: SplitName) -> list[SampleEntry]:
        """Return the samples assigned to ``name``."""
        return [sample for sample in self.samples if sample.split == name]

    def seen_tumor_classes(self) -> list[str]:
        """Tumor classes that may appear in training splits."""
        return [name for name in self.tumor_classes if name not in self.unseen_classes]

    def training_classes(self) -> list[str]:
        """Classes with a trained query: organs, then seen tumors, in vocabulary order."""
        trained = {*self.organ_classes, *self.seen_tumor_classes()}
        return [name for name in self.classes[1:] if name in trained]
