"""Run directories: effective config, seed, source revision and metrics."""

import json
import logging
import subprocess
from pathlib import Path

from pydantic import BaseModel

from dsm.core.config import RunConfig
from dsm.models import RunInfo

logger = logging.getLogger(__name__)

UNKNOWN_REVISION = "unknown"
CONFIG_FILE = "config.json"
RUN_FILE = "run.json"
METRICS_FILE = "metrics.json"


def git_describe(cwd: Path | None = None) -> str:
    """``git describe --always --dirty`` of the working tree, or ``unknown``."""
    try:
        completed = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],  # noqa: S607
            cwd=cwd,
            capture_output=True,
            check=False,
            text=True,
            timeout=10,
        )
    except (OSError, subprocess.TimeoutExpired):
        return UNKNOWN_REVISION
    revision = completed.stdout.strip()
    return revision if completed.returncode == 0 and revision else UNKNOWN_REVISION


def run_info(config: RunConfig, seed: int | None = None) -> RunInfo:
    """Provenance block echoed into every report."""
    return RunInfo(
        seed=config.train.seed if seed is None else seed,
        git_describe=git_describe(),
        config_digest=config.digest(),
        config=config.model_dump(mode="json"),
    )


def write_run_dir(out: Path, info: RunInfo, config: RunConfig, metrics: BaseModel | None = None) -> None:
    """Write the flat config, the provenance block and optionally the metrics."""
    out.mkdir(parents=True, exist_ok=True)
    (out / CONFIG_FILE).write_text(json.dumps(config.flat(), indent=2), encoding="utf-8")
    (out / RUN_FILE).write_text(info.model_dump_json(indent=2), encoding="utf-8")
    if metrics is not None:
        write_report(out / METRICS_FILE, metrics)
    logger.debug("wrote run files to %s", out)


def write_report(path: Path, report: BaseModel) -> None:
    """Write a report model as indented JSON."""
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(report.model_dump_json(indent=2), encoding="utf-8")
