"""Exception taxonomy shared by the library and the CLI.

The CLI maps these onto exit codes: success -> 0, UsageError -> 1,
DataError -> 2, NumericError -> 3.
"""

from __future__ import annotations


class AdaptKTError(Exception):
    """Base class for everything this package raises on purpose."""


class UsageError(AdaptKTError):
    """Bad invocation: unknown option, missing file, invalid config value."""


class DataError(AdaptKTError):
    """Malformed input data: bad JSONL record, unknown qid, label outside {0,1}."""


class NumericError(AdaptKTError):
    """Numerical failure: non-finite loss or gradient, invalid hyperparameter."""


class ShapeError(AdaptKTError):
    """Operands with incompatible shapes reached a tensor primitive."""
