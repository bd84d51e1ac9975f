"""Error hierarchy shared by the library and the command line."""

from typing import ClassVar

from dsm.constants import (
    DATA_ERROR_CODE,
    NUMERIC_FAILURE_CODE,
    USAGE_ERROR_CODE,
)


class DsmError(Exception):
    """Base class for every error raised on purpose by this package."""

    exit_code: ClassVar[int] = USAGE_ERROR_CODE


class ContractError(DsmError):
    """A shape, dtype or precondition of an operation was violated."""


class UsageError(DsmError):
    """The package was invoked with inconsistent arguments or missing inputs."""


class DataError(DsmError):
    """A file, manifest or dataset does not satisfy its format or invariants."""

    exit_code: ClassVar[int] = DATA_ERROR_CODE


class NumericFailureError(DsmError):
    """A forward result or loss contains NaN or Inf."""

    exit_code: ClassVar[int] = NUMERIC_FAILURE_CODE
