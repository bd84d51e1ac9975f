from pathlib import Path

import numpy as np
import pytest

from dsm.core.config import DataSettings
from dsm.data.manifest import Dataset, build_manifest
from dsm.tests.utils.helpers import TINY_PATCH, TINY_TEXT_DIM

DATASET_SEED = 7


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def data_settings() -> DataSettings:
    return DataSettings(patch_size=TINY_PATCH, n_train=4, n_val=1, n_test=4, text_dim=TINY_TEXT_DIM)


@pytest.fixture(scope="session")
def dataset_dir(tmp_path_factory: pytest.TempPathFactory, data_settings: DataSettings) -> Path:
    out = tmp_path_factory.mktemp("dataset")
    build_manifest(data_settings, DATASET_SEED, out)
    return out


@pytest.fixture(scope="session")
def dataset(dataset_dir: Path) -> Dataset:
    return Dataset.open(dataset_dir)
