"""Component ablation: train and evaluate one model per toggle combination."""

import logging
from collections.abc import Sequence
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import pandas as pd

from dsm.constants import BEST_CHECKPOINT_NAME
from dsm.core.config import AblationSettings, RunConfig
from dsm.core.provenance import run_info
from dsm.data.manifest import Dataset
from dsm.errors import UsageError
from dsm.models import AblationReport, AblationRow
from dsm.training.checkpoint import load_checkpoint
from dsm.training.evaluate import evaluate_checkpoint
from dsm.training.trainer import run_training

logger = logging.getLogger(__name__)

COMPONENTS: tuple[str, ...] = ("kmmm", "amvp", "dqr", "text_align")
FULL_VARIANT = "full"
NONE_VARIANT = "none"
DEFAULT_VARIANTS = (
    NONE_VARIANT,
    "amvp,dqr,text_align",
    "kmmm,dqr,text_align",
    "kmmm,amvp,text_align",
    "kmmm,amvp,dqr",
    FULL_VARIANT,
)
TABLE_COLUMNS = ["variant", "seen_dsc", "unseen_dsc", "auroc", "fpr95"]


@dataclass(frozen=True)
class Variant:
    """A named set of enabled components."""

    name: str
    flags: AblationSettings


def variant_name(flags: AblationSettings) -> str:
    """``full``, ``none`` or the enabled components in canonical order."""
    enabled = [name for name in COMPONENTS if getattr(flags, name)]
    if len(enabled) == len(COMPONENTS):
        return FULL_VARIANT
    return ",".join(enabled) or NONE_VARIANT


def parse_variant(spec: str) -> Variant:
    """Read ``none``, ``full`` or a comma-separated list of enabled components."""
    parts = [part.strip() for part in spec.split(",") if part.strip()]
    if not parts:
        msg = f"variant {spec!r} is empty"
        raise UsageError(msg)
    if parts == [FULL_VARIANT]:
        parts = list(COMPONENTS)
    elif parts == [NONE_VARIANT]:
        parts = []
    unknown = sorted(set(parts) - set(COMPONENTS))
    if unknown:
        msg = f"variant {spec!r} names unknown components {unknown}; use {list(COMPONENTS)}, none or full"
        raise UsageError(msg)
    flags = AblationSettings(**{name: name in parts for name in COMPONENTS})
    return Variant(name=variant_name(flags), flags=flags)


def parse_variants(specs: str | None) -> list[Variant]:
    """
    Variants of a ``;``-separated list, deduplicated, with the full model last.

    Without a list the six standard rows are used. The full model is
    appended when it was not requested.
    """
    requested = [part for part in (specs or "").split(";") if part.strip()] or list(DEFAULT_VARIANTS)
    variants: dict[str, Variant] = {}
    for spec in requested:
        variant = parse_variant(spec)
        variants.setdefault(variant.name, variant)
    full = variants.pop(FULL_VARIANT, None) or parse_variant(FULL_VARIANT)
    return [*variants.values(), full]


def stage1_key(flags: AblationSettings) -> str:
    """Organ-stage runs depend on the k-means toggle only."""
    return "stage1-kmmm" if flags.kmmm else "stage1-attention"


def stage_config(
    config: RunConfig,
    flags: AblationSettings,
    stage: int,
    out: Path,
    init: Path | None = None,
) -> RunConfig:
    """``config`` with the toggles, stage and output paths of one ablation run."""
    return config.model_copy(
        update={
            "ablation": flags,
            "train": config.train.model_copy(update={"stage": stage}),
            "paths": config.paths.model_copy(update={"out": out, "init": init}),
        }
    )


def train_stage(config: RunConfig) -> Path:
    """Train one stage; return its best checkpoint."""
    run_training(config)
    return config.paths.out / BEST_CHECKPOINT_NAME


def evaluate_variant(variant: Variant, checkpoint: Path, config: RunConfig) -> AblationRow:
    """Seen-tumor DSC on test_seen; unseen DSC, AUROC and FPR95 on test_unseen."""
    if config.paths.data is None:
        msg = "ablation needs a dataset (--data)"
        raise UsageError(msg)
    dataset = Dataset.open(config.paths.data)
    trained = load_checkpoint(checkpoint)
    info = run_info(config)
    seen = evaluate_checkpoint(trained, dataset, "test_seen", info)
    unseen = evaluate_checkpoint(trained, dataset, "test_unseen", info)
    return AblationRow(
        variant=variant.name,
        flags=variant.flags.model_dump(),
        seen_dsc=seen.mean_dsc(dataset.manifest.seen_tumor_classes()),
        unseen_dsc=unseen.mean_dsc(dataset.manifest.unseen_classes),
        auroc=None if unseen.ood is None else unseen.ood.auroc_mean,
        fpr95=None if unseen.ood is None else unseen.ood.fpr95_mean,
    )


def finish_variant(variant: Variant, config: RunConfig, out: Path) -> AblationRow:
    """Train the tumor stage of ``variant`` on its shared organ stage and score it."""
    organ_stage = out / stage1_key(variant.flags) / BEST_CHECKPOINT_NAME
    tumor_config = stage_config(config, variant.flags, 2, out / variant.name, organ_stage)
    return evaluate_variant(variant, train_stage(tumor_config), tumor_config)


def run_ablation(
    config: RunConfig,
    variants: Sequence[Variant],
    out: Path,
    parallel: int = 1,
) -> AblationReport:
    """
    Train both stages of every variant and evaluate it on the test splits.

    Organ-stage runs are shared between variants with the same k-means
    toggle and finish before any tumor stage starts. Rows come back in
    request order whatever ``parallel`` is.
    """
    if not variants or variants[-1].name != FULL_VARIANT:
        msg = "the full model must be the last variant"
        raise UsageError(msg)
    organ_stages = {stage1_key(variant.flags): variant.flags for variant in variants}
    organ_configs = [stage_config(config, flags, 1, out / key) for key, flags in organ_stages.items()]
    count = len(variants)
    if parallel > 1:
        with ProcessPoolExecutor(max_workers=parallel) as pool:
            list(pool.map(train_stage, organ_configs))
            rows = list(pool.map(finish_variant, variants, [config] * count, [out] * count))
    else:
        for organ_config in organ_configs:
            train_stage(organ_config)
        rows = [finish_variant(variant, config, out) for variant in variants]
    for row in rows:
        logger.info("variant %s: seen DSC %s, unseen DSC %s", row.variant, row.seen_dsc, row.unseen_dsc)
    return AblationReport(run=run_info(config), rows=rows)


def ablation_table(report: AblationReport) -> str:
    """Aligned text table of the report rows."""
    frame = pd.DataFrame.from_records(
        [row.model_dump(include=set(TABLE_COLUMNS)) for row in report.rows],
        columns=TABLE_COLUMNS,
    ).astype(dict.fromkeys(TABLE_COLUMNS[1:], "float64"))
    return frame.to_string(index=False, na_rep="n/a", float_format="{:.4f}".format)
