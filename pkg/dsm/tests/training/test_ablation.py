from pathlib import Path
from unittest.mock import patch

import pytest

from dsm.core.config import AblationSettings
from dsm.core.provenance import run_info
from dsm.errors import UsageError
from dsm.models import AblationReport, AblationRow
from dsm.tests.utils.helpers import tiny_config
from dsm.training.ablation import (
    DEFAULT_VARIANTS,
    ablation_table,
    parse_variant,
    parse_variants,
    run_ablation,
    stage1_key,
    variant_name,
)


def test_variant_names_are_canonical() -> None:
    assert parse_variant("text_align, kmmm").name == "kmmm,text_align"
    assert parse_variant("full").flags == AblationSettings()
    assert variant_name(AblationSettings(kmmm=False, amvp=False, dqr=False, text_align=False)) == "none"


@pytest.mark.parametrize("spec", ["", " , ", "kmmm,attention"])
def test_bad_variants_are_usage_errors(spec: str) -> None:
    with pytest.raises(UsageError):
        parse_variant(spec)


def test_default_variants_end_with_full_model() -> None:
    variants = parse_variants(None)
    assert [variant.name for variant in variants] == list(DEFAULT_VARIANTS)


def test_requested_variants_are_deduplicated_and_full_is_appended() -> None:
    variants = parse_variants("kmmm;full;kmmm;none")
    assert [variant.name for variant in variants] == ["kmmm", "none", "full"]


def test_organ_stage_depends_on_kmmm_only() -> None:
    assert stage1_key(AblationSettings(amvp=False, dqr=False)) == "stage1-kmmm"
    assert stage1_key(AblationSettings(kmmm=False)) == "stage1-attention"


def _row(variant: str) -> AblationRow:
    return AblationRow(variant=variant, flags={}, seen_dsc=0.5, unseen_dsc=None, auroc=0.75, fpr95=0.25)


def test_ablation_shares_organ_stages(tmp_path: Path) -> None:
    config = tiny_config(tmp_path, tmp_path)
    variants = parse_variants("none;amvp,dqr,text_align;kmmm,dqr")
    with (
        patch("dsm.training.ablation.train_stage") as train_stage,
        patch("dsm.training.ablation.finish_variant", side_effect=lambda v, c, o: _row(v.name)) as finish,
    ):
        report = run_ablation(config, variants, tmp_path)
    outs = sorted(call.args[0].paths.out.name for call in train_stage.call_args_list)
    assert outs == ["stage1-attention", "stage1-kmmm"]
    assert all(call.args[0].train.stage == 1 for call in train_stage.call_args_list)
    assert finish.call_count == 4
    assert [row.variant for row in report.rows] == ["none", "amvp,dqr,text_align", "kmmm,dqr", "full"]


def test_full_model_must_come_last(tmp_path: Path) -> None:
    config = tiny_config(tmp_path, tmp_path)
    with pytest.raises(UsageError):
        run_ablation(config, [parse_variant("full"), parse_variant("none")], tmp_path)


def test_table_shows_missing_values(tmp_path: Path) -> None:
    report = AblationReport(run=run_info(tiny_config(tmp_path, tmp_path)), rows=[_row("none"), _row("full")])
    lines = ablation_table(report).splitlines()
    assert lines[0].split() == ["variant", "seen_dsc", "unseen_dsc", "auroc", "fpr95"]
    assert lines[1].split() == ["none", "0.5000", "n/a", "0.7500", "0.2500"]
    assert len(lines) == 3
