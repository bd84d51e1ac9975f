"""Handlers of the ``dsm`` subcommands; each returns the process exit code."""

import argparse
import logging
import sys
from collections.abc import Mapping
from pathlib import Path

from pydantic import BaseModel, JsonValue

from dsm.constants import NUMERIC_FAILURE_CODE, OK_CODE
from dsm.core.config import RunConfig, load_run_config, parse_override
from dsm.core.provenance import run_info, write_report
from dsm.data.manifest import Dataset, build_manifest
from dsm.data.volume_io import read_volume, write_volume
from dsm.gradcheck_suite import run_suite
from dsm.layers.align import load_text_bank
from dsm.training.ablation import ablation_table, parse_variants, run_ablation
from dsm.training.checkpoint import load_checkpoint
from dsm.training.evaluate import evaluate_checkpoint, infer_volume
from dsm.training.trainer import run_training

logger = logging.getLogger(__name__)


def effective_config(args: argparse.Namespace, flags: Mapping[str, JsonValue]) -> RunConfig:
    """Preset, config file, then ``--set`` overrides, then the canonical flags that were given."""
    overrides = dict(parse_override(assignment) for assignment in args.set)
    overrides.update({key: value for key, value in flags.items() if value is not None})
    return load_run_config(args.config, overrides, preset=args.preset)


def _path(value: Path | None) -> str | None:
    return None if value is None else str(value)


def _emit(report: BaseModel, path: Path | None) -> None:
    if path is None:
        sys.stdout.write(report.model_dump_json(indent=2) + "\n")
    else:
        write_report(path, report)
        logger.info("wrote report to %s", path)


def gen_data(args: argparse.Namespace) -> int:
    """Generate the synthetic dataset, its manifest and its text bank."""
    config = effective_config(
        args,
        {
            "data.n_train": args.n_train,
            "data.n_test": args.n_test,
            "data.unseen_class": args.unseen_class,
        },
    )
    manifest = build_manifest(config.data, args.seed, args.out)
    logger.info("wrote %s volumes to %s", len(manifest.samples), args.out)
    return OK_CODE


def train(args: argparse.Namespace) -> int:
    """Train one stage."""
    config = effective_config(
        args,
        {
            "train.stage": args.stage,
            "paths.data": _path(args.data),
            "paths.init": _path(args.init),
            "paths.out": _path(args.out),
        },
    )
    run_training(config, resume=args.resume)
    return OK_CODE


def evaluate(args: argparse.Namespace) -> int:
    """Score a checkpoint on one split."""
    checkpoint = load_checkpoint(args.ckpt)
    config = RunConfig.model_validate(checkpoint.config)
    report = evaluate_checkpoint(checkpoint, Dataset.open(args.data), args.split, run_info(config))
    for summary in report.classes:
        logger.info("%s DSC %.4f ± %.4f (%s volumes)", summary.name, summary.dsc_mean, summary.dsc_sem, summary.count)
    if report.ood is not None:
        logger.info("AUROC %.4f, FPR95 %.4f", report.ood.auroc_mean, report.ood.fpr95_mean)
    _emit(report, args.report)
    return OK_CODE


def infer(args: argparse.Namespace) -> int:
    """Segment one volume; optionally export its anomaly map."""
    predicted, anomaly = infer_volume(
        load_checkpoint(args.ckpt),
        read_volume(args.volume),
        load_text_bank(args.text_bank),
    )
    write_volume(args.out, predicted)
    if args.export_anomaly is not None:
        write_volume(args.export_anomaly, anomaly)
        logger.info("wrote anomaly map to %s", args.export_anomaly)
    return OK_CODE


def gradcheck(args: argparse.Namespace) -> int:
    """Verify tape gradients against finite differences."""
    report = run_suite(args.seed, args.op)
    _emit(report, args.report)
    failed = [result.op for result in report.results if not result.passed]
    if failed:
        logger.error("gradients out of tolerance for %s", failed)
        return NUMERIC_FAILURE_CODE
    return OK_CODE


def ablate(args: argparse.Namespace) -> int:
    """Train and score every requested component combination."""
    config = effective_config(args, {"paths.data": _path(args.data)})
    report = run_ablation(config, parse_variants(args.flags), args.out, args.parallel)
    if args.report is not None:
        write_report(args.report, report)
    sys.stdout.write(ablation_table(report) + "\n")
    return OK_CODE
