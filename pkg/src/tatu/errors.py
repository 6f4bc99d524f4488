"""Exception hierarchy. Each class carries a machine-readable category and
the process exit code the CLI maps it to."""

from __future__ import annotations


class TatuError(Exception):
    category = "error"
    exit_code = 1


class ParameterError(TatuError, ValueError):
    category = "parameter"
    exit_code = 2


class DataError(TatuError, ValueError):
    category = "data"
    exit_code = 7


class MissingArtifactError(TatuError, FileNotFoundError):
    category = "missing_file"
    exit_code = 3


class SchemaError(TatuError, ValueError):
    category = "schema"
    exit_code = 4


class ChecksumError(TatuError, ValueError):
    category = "checksum"
    exit_code = 5


class NumericError(TatuError, ArithmeticError):
    category = "numeric"
    exit_code = 6


class UnfittedError(TatuError, RuntimeError):
    category = "unfitted"
    exit_code = 8


class QuantifierError(TatuError, ValueError):
    category = "quantifier"
    exit_code = 9


class DegenerateReferenceError(ParameterError):
    category = "degenerate_reference"


class VerificationError(TatuError):
    """A numerical bound check reported a violation."""

    category = "verification_failed"
    exit_code = 10
