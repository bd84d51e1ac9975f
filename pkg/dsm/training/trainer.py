"""Two-stage training loop with deterministic epochs, checkpoints and resume."""

import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from dsm.constants import BEST_CHECKPOINT_NAME, LAST_CHECKPOINT_NAME
from dsm.core.config import RunConfig
from dsm.core.provenance import run_info, write_run_dir
from dsm.core.seeding import derive_rng
from dsm.core.tensor import Tape, Tensor, constant, index, mul
from dsm.data.manifest import Dataset
from dsm.data.volume_io import VolumeSample
from dsm.errors import NumericFailureError, UsageError
from dsm.layers.align import TextEmbeddingBank
from dsm.models import EpochMetrics, RunInfo, SampleEntry, TrainReport
from dsm.network import DsmNetwork, is_stage1_parameter
from dsm.training.augment import augment_sample
from dsm.training.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from dsm.training.evaluate import build_network, evaluate_network
from dsm.training.losses import segmentation_loss
from dsm.training.metrics import summarize_classes
from dsm.training.optim import AdamW, AdamWHyper

logger = logging.getLogger(__name__)

AUGMENT_STREAM = 1


@dataclass(frozen=True)
class EpochRecord:
    """Summary of one finished epoch."""

    epoch: int
    loss: float
    lr: float
    val_dsc: float | None


def interleave(
    organ_only: Sequence[SampleEntry],
    tumor_bearing: Sequence[SampleEntry],
    ratio: float,
) -> list[SampleEntry]:
    """
    Mix organ-only and tumor-bearing samples, ``ratio`` of the former per one of the latter.

    Every tumor-bearing sample appears once; organ-only samples are reused
    cyclically when too few exist.
    """
    if not tumor_bearing:
        return list(organ_only)
    if not organ_only:
        return list(tumor_bearing)
    wanted = round(len(tumor_bearing) * ratio)
    mixed = []
    taken_organ = 0
    for position, entry in enumerate(tumor_bearing):
        quota = round((position + 1) * ratio)
        while taken_organ < min(quota, wanted):
            mixed.append(organ_only[taken_organ % len(organ_only)])
            taken_organ += 1
        mixed.append(entry)
    return mixed


class Trainer:
    """Owns the network, the optimizer and the training position of one run."""

    def __init__(self, config: RunConfig, dataset: Dataset, out: Path) -> None:
        manifest = dataset.manifest
        if config.model.organ_queries != len(manifest.organ_classes):
            msg = f"{config.model.organ_queries} organ queries for {len(manifest.organ_classes)} organ classes"
            raise UsageError(msg)
        seen_tumors = manifest.seen_tumor_classes()
        if config.model.tumor_queries != len(seen_tumors):
            msg = f"{config.model.tumor_queries} tumor queries for {len(seen_tumors)} seen tumor classes"
            raise UsageError(msg)
        self.config = config
        self.dataset = dataset
        self.out = out
        self.stage = config.train.stage
        self.network: DsmNetwork = build_network(config)
        trained = manifest.training_classes()
        self.query_names = trained[: config.model.organ_queries] if self.stage == 1 else trained
        self.bank: TextEmbeddingBank = dataset.text_bank().subset(trained)
        self.organ_pool = dataset.split("train1")
        self.tumor_pool = dataset.split("train2") if self.stage == 2 else []  # noqa: PLR2004
        if not self.organ_pool and not self.tumor_pool:
            msg = f"no training volumes for stage {self.stage}"
            raise UsageError(msg)
        self.samples: dict[str, VolumeSample] = {
            entry.path: dataset.volume(entry) for entry in (*self.organ_pool, *self.tumor_pool)
        }

        self.epochs = config.train.epochs()
        self.steps_per_epoch = math.ceil(len(self.epoch_order(0)) / config.train.batch_size)
        if config.train.max_steps_per_epoch is not None:
            self.steps_per_epoch = min(self.steps_per_epoch, config.train.max_steps_per_epoch)
        params = (
            self.network.stage1_parameters()
            if self.stage == 1
            else list(self.network.named_parameters())
        )
        train = config.train
        self.optimizer = AdamW(
            params,
            AdamWHyper(
                lr=train.learning_rate(),
                beta1=train.beta1,
                beta2=train.beta2,
                weight_decay=train.weight_decay,
                eps=train.adam_eps,
            ),
            total_steps=self.epochs * self.steps_per_epoch,
            warmup_fraction=train.warmup_fraction,
        )
        self.start_epoch = 0
        self.best_metric: float | None = None
        self.history: list[EpochRecord] = []

    def initialize_from(self, checkpoint: Checkpoint) -> list[str]:
        """Copy the organ-stage parameters of ``checkpoint``; the tumor stage keeps its fresh init."""
        organ_stage = {name: values for name, values in checkpoint.params.items() if is_stage1_parameter(name)}
        expected = [name for name, _ in self.network.stage1_parameters()]
        missing = sorted(set(expected) - set(organ_stage))
        if missing:
            msg = f"initial checkpoint lacks organ-stage parameters {missing[:3]}"
            raise UsageError(msg)
        loaded = self.network.load_state(organ_stage, strict=False)
        logger.info("initialized %s organ-stage parameters from a stage %s checkpoint", len(loaded), checkpoint.stage)
        return loaded

    def resume_from(self, checkpoint: Checkpoint) -> None:
        """Continue exactly where ``checkpoint`` stopped."""
        if checkpoint.stage != self.stage:
            msg = f"cannot resume stage {self.stage} from a stage {checkpoint.stage} checkpoint"
            raise UsageError(msg)
        if checkpoint.config_digest != self.config.digest():
            logger.warning("resuming with a config that differs from the checkpoint's")
        self.network.load_state(checkpoint.params)
        self.optimizer.load_moments(checkpoint.first_moments, checkpoint.second_moments, checkpoint.step)
        self.start_epoch = checkpoint.epoch
        self.best_metric = checkpoint.best_metric
        logger.info("resumed stage %s at epoch %s, step %s", self.stage, checkpoint.epoch, checkpoint.step)

    def epoch_order(self, epoch: int) -> list[SampleEntry]:
        """Sample order of ``epoch``, a pure function of (seed, stage, epoch)."""
        rng = derive_rng(self.config.train.seed, self.stage, epoch)
        organ = [self.organ_pool[i] for i in rng.permutation(len(self.organ_pool))]
        if self.stage == 1:
            return organ
        tumor = [self.tumor_pool[i] for i in rng.permutation(len(self.tumor_pool))]
        return interleave(organ, tumor, self.config.train.organ_tumor_ratio)

    def sample_loss(self, sample: VolumeSample) -> Tensor:
        """Segmentation loss of one volume over its labeled query rows."""
        dtype = self.network.settings.dtype
        volume = constant(sample.image[None], dtype=dtype)
        targets, rows = sample.class_targets(self.query_names)
        mode = self.config.train.dice_mode
        if self.stage == 1:
            return segmentation_loss(targets, self.network.stage1_forward(volume).masks, rows, mode)
        output = self.network.stage2_forward(volume, self.bank, training=True)
        p_diag = None
        if output.probabilities is not None and rows:
            diagonal = np.array(rows)
            p_diag = index(output.probabilities, (diagonal, diagonal))
        return segmentation_loss(targets, output.masks, rows, mode, p_diag)

    def train_step(self, batch: Sequence[VolumeSample]) -> tuple[float, float]:
        """Accumulate gradients over ``batch`` and apply one update; return (loss, lr)."""
        self.optimizer.zero_grad()
        total = 0.0
        for sample in batch:
            with Tape() as tape:
                loss = mul(self.sample_loss(sample), 1.0 / len(batch))
                tape.backward(loss)
            value = loss.item()
            if not math.isfinite(value):
                msg = f"non-finite loss {value} at step {self.optimizer.state.step}"
                raise NumericFailureError(msg)
            total += value
        lr = self.optimizer.step()
        self.network.zero_grad()
        return total, lr

    def validate(self) -> float | None:
        """Mean class DSC on the validation split, if it has volumes."""
        if not self.dataset.split("val"):
            return None
        volumes = evaluate_network(self.network, self.stage, self.dataset, "val", self.query_names)
        summaries = summarize_classes(volumes)
        if not summaries:
            return None
        return float(np.mean([summary.dsc_mean for summary in summaries]))

    def checkpoint(self, epoch: int) -> Checkpoint:
        """Snapshot of the network and the optimizer after ``epoch`` finished epochs."""
        first, second = self.optimizer.moments()
        return Checkpoint(
            stage=self.stage,
            step=self.optimizer.state.step,
            epoch=epoch,
            config_digest=self.config.digest(),
            config=self.config.model_dump(mode="json"),
            params=self.network.state(),
            first_moments={name: values.copy() for name, values in first.items()},
            second_moments={name: values.copy() for name, values in second.items()},
            best_metric=self.best_metric,
            query_classes=tuple(self.query_names),
        )

    def run_epoch(self, epoch: int) -> EpochRecord:
        """Train one epoch; return its summary."""
        augment_rng = derive_rng(self.config.train.seed, self.stage, epoch, AUGMENT_STREAM)
        order = self.epoch_order(epoch)
        batch_size = self.config.train.batch_size
        losses = []
        lr = self.optimizer.current_lr()
        for step in range(self.steps_per_epoch):
            entries = order[step * batch_size : (step + 1) * batch_size]
            batch = [self.samples[entry.path] for entry in entries]
            if self.config.train.augment:
                batch = [augment_sample(sample, augment_rng, self.config.train) for sample in batch]
            loss, lr = self.train_step(batch)
            losses.append(loss)
            logger.debug("stage %s epoch %s step %s loss %.6f lr %.3e", self.stage, epoch, step, loss, lr)
        return EpochRecord(epoch=epoch, loss=float(np.mean(losses)), lr=lr, val_dsc=self.validate())

    def fit(self) -> list[EpochRecord]:
        """Train the remaining epochs, writing ``last`` every epoch and ``best`` on improvement."""
        for epoch in range(self.start_epoch, self.epochs):
            record = self.run_epoch(epoch)
            self.history.append(record)
            improved = record.val_dsc is None or self.best_metric is None or record.val_dsc > self.best_metric
            if improved and record.val_dsc is not None:
                self.best_metric = record.val_dsc
            snapshot = self.checkpoint(epoch + 1)
            save_checkpoint(self.out / LAST_CHECKPOINT_NAME, snapshot)
            if improved:
                save_checkpoint(self.out / BEST_CHECKPOINT_NAME, snapshot)
            logger.info(
                "stage %s epoch %s/%s loss %.4f lr %.3e val DSC %s",
                self.stage,
                epoch + 1,
                self.epochs,
                record.loss,
                record.lr,
                "n/a" if record.val_dsc is None else f"{record.val_dsc:.4f}",
            )
        return self.history

    def report(self, run: RunInfo) -> TrainReport:
        """History of the epochs trained by this trainer."""
        return TrainReport(
            run=run,
            stage=self.stage,
            epochs=[
                EpochMetrics(epoch=record.epoch, loss=record.loss, lr=record.lr, val_dsc=record.val_dsc)
                for record in self.history
            ],
            best_metric=self.best_metric,
        )


def create_trainer(
    config: RunConfig,
    dataset: Dataset,
    out: Path,
    *,
    resume: bool = False,
) -> Trainer:
    """Trainer ready to fit: resumed from ``out`` or initialized from ``paths.init`` for stage 2."""
    trainer = Trainer(config, dataset, out)
    last = out / LAST_CHECKPOINT_NAME
    if resume:
        if not last.exists():
            msg = f"--resume given but {last} does not exist"
            raise UsageError(msg)
        trainer.resume_from(load_checkpoint(last))
        return trainer
    if config.train.stage == 2:  # noqa: PLR2004
        if config.paths.init is None:
            msg = "stage 2 needs a stage-1 checkpoint (--init)"
            raise UsageError(msg)
        if not config.paths.init.exists():
            msg = f"stage-1 checkpoint {config.paths.init} does not exist"
            raise UsageError(msg)
        trainer.initialize_from(load_checkpoint(config.paths.init))
    return trainer


def run_training(config: RunConfig, *, resume: bool = False) -> Trainer:
    """Train one stage into ``config.paths.out`` and write its run files."""
    if config.paths.data is None:
        msg = "training needs a dataset (--data)"
        raise UsageError(msg)
    out = config.paths.out
    trainer = create_trainer(config, Dataset.open(config.paths.data), out, resume=resume)
    trainer.fit()
    info = run_info(config)
    write_run_dir(out, info, config, trainer.report(info))
    logger.info("stage %s finished; checkpoints in %s", config.train.stage, out)
    return trainer
