"""Exception hierarchy.

Every error carries a short machine-readable ``code`` that the CLI prints
alongside the message, and an ``exit_status`` (2 config, 3 data, 4 runtime).
"""

from __future__ import annotations


class DeltaShapError(Exception):
    code = "RUNTIME_ERROR"
    exit_status = 4


class ConfigError(DeltaShapError, ValueError):
    code = "CONFIG_ERROR"
    exit_status = 2


class InvalidLayerError(ConfigError):
    code = "INVALID_LAYER"


class InvalidBandError(ConfigError):
    code = "INVALID_BAND"


class EnumerationLimitError(ConfigError):
    code = "ENUMERATION_LIMIT"


class DuplicateMemberError(DeltaShapError, ValueError):
    code = "DUPLICATE_MEMBER"


class DataError(DeltaShapError, ValueError):
    code = "DATA_ERROR"
    exit_status = 3


class CSVParseError(DataError):
    code = "PARSE_ERROR"

    def __init__(self, message: str, row: int | None = None, column: str | None = None):
        where = []
        if row is not None:
            where.append(f"row {row}")
        if column is not None:
            where.append(f"column {column!r}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)
        self.row = row
        self.column = column


class DegenerateDataError(DataError):
    code = "DEGENERATE_DATA"


class InputFileNotFound(DataError):
    code = "FILE_NOT_FOUND"


class AlignmentError(DataError):
    code = "ALIGNMENT_ERROR"


class UndefinedCorrelationError(DataError):
    code = "UNDEFINED_CORRELATION"


class DivergenceError(DeltaShapError, ArithmeticError):
    code = "DIVERGENCE"
