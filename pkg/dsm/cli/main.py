"""``dsm`` command line: argument parsing and exit-code mapping."""

import argparse
import logging
import sys
from collections.abc import Callable, Sequence
from pathlib import Path
from typing import NoReturn

from pydantic import ValidationError

from dsm.cli import commands
from dsm.constants import USAGE_ERROR_CODE
from dsm.core.config import PRESETS
from dsm.errors import DsmError, UsageError
from dsm.gradcheck_suite import SUITE
from dsm.models import SPLIT_NAMES

logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)

type Handler = Callable[[argparse.Namespace], int]


class CliParser(argparse.ArgumentParser):
    """Argument parser whose errors become usage errors instead of exiting."""

    def error(self, message: str) -> NoReturn:
        """Raise instead of printing usage and exiting with status 2."""
        raise UsageError(message)


def _common() -> CliParser:
    parser = CliParser(add_help=False)
    parser.add_argument("--verbose", action="store_true", help="log at DEBUG level")
    parser.add_argument(
        "--set",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="override a dotted config key; repeatable",
    )
    return parser


def _with_config(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, help="JSON config with flat dotted keys")
    parser.add_argument(
        "--preset",
        choices=sorted(PRESETS),
        default="desk",
        help="base values under the config file: desk defaults or the full-scale setup",
    )


def build_parser() -> CliParser:
    """Parser of every subcommand."""
    parser = CliParser(prog="dsm", description="Desk-scale organ and tumor segmentation")
    subcommands = parser.add_subparsers(dest="command", required=True)
    common = [_common()]

    gen_data = subcommands.add_parser("gen-data", parents=common, help="generate a synthetic dataset")
    gen_data.add_argument("--out", type=Path, required=True)
    gen_data.add_argument("--seed", type=int, default=0)
    gen_data.add_argument("--n-train", type=int)
    gen_data.add_argument("--n-test", type=int)
    gen_data.add_argument("--unseen-class")
    _with_config(gen_data)
    gen_data.set_defaults(handler=commands.gen_data)

    train = subcommands.add_parser("train", parents=common, help="train one stage")
    train.add_argument("--stage", type=int, choices=(1, 2))
    train.add_argument("--data", type=Path)
    train.add_argument("--init", type=Path, help="stage-1 checkpoint seeding stage 2")
    train.add_argument("--out", type=Path)
    train.add_argument("--resume", action="store_true", help="continue from last.dsmc in --out")
    _with_config(train)
    train.set_defaults(handler=commands.train)

    evaluate = subcommands.add_parser("eval", parents=common, help="evaluate a checkpoint")
    evaluate.add_argument("--ckpt", type=Path, required=True)
    evaluate.add_argument("--data", type=Path, required=True)
    evaluate.add_argument("--split", choices=SPLIT_NAMES, default="test_unseen")
    evaluate.add_argument("--report", type=Path)
    evaluate.set_defaults(handler=commands.evaluate)

    infer = subcommands.add_parser("infer", parents=common, help="segment one volume")
    infer.add_argument("--ckpt", type=Path, required=True)
    infer.add_argument("--volume", type=Path, required=True)
    infer.add_argument("--text-bank", type=Path, required=True)
    infer.add_argument("--out", type=Path, required=True)
    infer.add_argument("--export-anomaly", type=Path, metavar="PATH")
    infer.set_defaults(handler=commands.infer)

    gradcheck = subcommands.add_parser("gradcheck", parents=common, help="verify gradients")
    gradcheck.add_argument("--op", action="append", choices=sorted(SUITE), default=[])
    gradcheck.add_argument("--seed", type=int, default=0)
    gradcheck.add_argument("--report", type=Path)
    gradcheck.set_defaults(handler=commands.gradcheck)

    ablate = subcommands.add_parser("ablate", parents=common, help="component ablation table")
    ablate.add_argument("--data", type=Path, required=True)
    ablate.add_argument("--flags", help="';'-separated variants of ','-separated components, or none/full")
    ablate.add_argument("--report", type=Path)
    ablate.add_argument("--out", type=Path, default=Path("runs/ablation"))
    ablate.add_argument("--parallel", type=int, default=1)
    _with_config(ablate)
    ablate.set_defaults(handler=commands.ablate)
    return parser


def dispatch(argv: Sequence[str]) -> int:
    """Run one subcommand; return 0, or the exit code of the error that stopped it."""
    try:
        args = build_parser().parse_args(argv)
        if args.verbose:
            logging.getLogger().setLevel(logging.DEBUG)
        handler: Handler = args.handler
        return handler(args)
    except DsmError as exc:
        logger.error("%s: %s", type(exc).__name__, exc)  # noqa: TRY400
        return exc.exit_code
    except ValidationError as exc:
        logger.error("invalid configuration: %s", exc)  # noqa: TRY400
        return USAGE_ERROR_CODE


def main() -> None:
    """Console entry point."""
    sys.exit(dispatch(sys.argv[1:]))
