import json
from pathlib import Path

import numpy as np
import pytest
from pydantic import JsonValue

from dsm.cli.main import dispatch
from dsm.constants import BEST_CHECKPOINT_NAME, OK_CODE
from dsm.core.config import RunConfig
from dsm.core.provenance import run_info
from dsm.data.manifest import Dataset
from dsm.tests.utils.helpers import tiny_config
from dsm.training.ablation import parse_variants, run_ablation
from dsm.training.checkpoint import Checkpoint
from dsm.training.evaluate import evaluate_checkpoint
from dsm.training.trainer import Trainer, run_training

TINY_MODEL = [
    "--set", "data.text_dim=8",
    "--set", "model.channels=[4,4,4,4]",
    "--set", "model.width=4",
    "--set", "model.state_dim=2",
    "--set", "model.guidance_channels=2",
    "--set", "model.text_dim=8",
    "--set", "model.temperature=0.1",
    "--set", "train.epochs_stage1=2",
    "--set", "train.epochs_stage2=1",
    "--set", "train.max_steps_per_epoch=2",
]  # fmt: skip


@pytest.mark.slow
def test_stage1_overfits_one_volume(dataset_dir: Path, dataset: Dataset, tmp_path: Path) -> None:
    overrides = {"train.augment": False, "train.lr_stage1": 1e-2, "train.epochs_stage1": 50, "train.max_steps_per_epoch": 1}
    config = tiny_config(dataset_dir, tmp_path, **overrides)
    trainer = Trainer(config, dataset, tmp_path)
    sample = dataset.volume(dataset.split("train1")[0])
    losses = [trainer.train_step([sample])[0] for _ in range(50)]
    assert all(np.isfinite(losses))
    assert np.mean(losses[-5:]) < np.mean(losses[:5])


@pytest.mark.slow
def test_generate_train_and_evaluate(tmp_path: Path) -> None:
    data = tmp_path / "data"
    argv = ["gen-data", "--out", str(data), "--seed", "7", "--n-train", "4", "--n-test", "4"]
    assert dispatch([*argv, "--set", "data.n_val=1", "--set", "data.text_dim=8"]) == OK_CODE

    stage1 = tmp_path / "stage1"
    assert dispatch(["train", "--stage", "1", "--data", str(data), "--out", str(stage1), *TINY_MODEL]) == OK_CODE
    for name in ("config.json", "run.json", "metrics.json", BEST_CHECKPOINT_NAME):
        assert (stage1 / name).exists()

    stage2 = tmp_path / "stage2"
    argv = ["train", "--stage", "2", "--data", str(data), "--init", str(stage1 / BEST_CHECKPOINT_NAME)]
    assert dispatch([*argv, "--out", str(stage2), *TINY_MODEL]) == OK_CODE

    report = tmp_path / "eval.json"
    argv = ["eval", "--ckpt", str(stage2 / BEST_CHECKPOINT_NAME), "--data", str(data), "--report", str(report)]
    assert dispatch(argv) == OK_CODE
    saved = json.loads(report.read_text(encoding="utf-8"))
    assert saved["split"] == "test_unseen"
    assert saved["ood"] is not None
    assert 0.0 <= saved["ood"]["auroc_mean"] <= 1.0
    assert "Colon Tumor" in {summary["name"] for summary in saved["classes"]}


LEARNING_BUDGET: dict[str, JsonValue] = {
    "train.augment": False,
    "train.lr_stage1": 1e-2,
    "train.lr_stage2": 1e-2,
    "train.epochs_stage1": 8,
    "train.epochs_stage2": 4,
    "train.max_steps_per_epoch": 4,
}


def _unseen_auroc(checkpoint: Checkpoint, dataset: Dataset, config: RunConfig) -> float:
    report = evaluate_checkpoint(checkpoint, dataset, "test_unseen", run_info(config))
    assert report.ood is not None
    return report.ood.auroc_mean


@pytest.mark.slow
def test_training_lifts_unseen_auroc(dataset_dir: Path, dataset: Dataset, tmp_path: Path) -> None:
    stage1 = tiny_config(dataset_dir, tmp_path / "stage1", **LEARNING_BUDGET)
    run_training(stage1)
    stage2 = tiny_config(
        dataset_dir,
        tmp_path / "stage2",
        **LEARNING_BUDGET,
        **{"train.stage": 2, "paths.init": str(tmp_path / "stage1" / BEST_CHECKPOINT_NAME)},
    )
    trained = run_training(stage2).checkpoint(stage2.train.epochs_stage2)
    untrained = Trainer(stage2, dataset, tmp_path / "untrained").checkpoint(0)
    assert _unseen_auroc(trained, dataset, stage2) > _unseen_auroc(untrained, dataset, stage2)


@pytest.mark.slow
def test_full_model_beats_bare_decoder_on_unseen_auroc(dataset_dir: Path, tmp_path: Path) -> None:
    config = tiny_config(dataset_dir, tmp_path, **LEARNING_BUDGET)
    report = run_ablation(config, parse_variants("none"), tmp_path / "ablation")
    rows = {row.variant: row for row in report.rows}
    assert list(rows) == ["none", "full"]
    assert rows["none"].auroc is not None
    assert rows["full"].auroc is not None
    assert rows["full"].auroc >= rows["none"].auroc + 0.03
