"""Exception hierarchy.

Every error carries a short machine-readable ``code`` so the CLI can emit
a stable JSON error record and pick an exit code.
"""

from __future__ import annotations


class BiopsyError(Exception):
    code = "error"
    exit_code = 3

    def __init__(self, message: str = "", **details):
        super().__init__(message)
        self.details = details

    def to_dict(self) -> dict:
        return {"error": self.code, "message": str(self), "details": self.details}


class InvalidArgument(BiopsyError, ValueError):
    code = "invalid-argument"
    exit_code = 2


class GeometryMismatch(BiopsyError, ValueError):
    code = "geometry-mismatch"


class BinsMismatch(BiopsyError, ValueError):
    code = "bins-mismatch"


class InsufficientData(BiopsyError, ValueError):
    code = "insufficient-data"


class EmptyROI(BiopsyError, ValueError):
    code = "empty-roi"


class EmptyMask(BiopsyError, ValueError):
    code = "empty-mask"


class InvalidSignal(BiopsyError, ValueError):
    code = "invalid-signal"


class InfeasibleSelection(BiopsyError):
    code = "infeasible-selection"
    exit_code = 4


class InfeasiblePlan(BiopsyError):
    code = "infeasible-plan"
    exit_code = 4


class SamplingFailed(BiopsyError):
    code = "sampling-failed"
    exit_code = 4


class TipOutside(BiopsyError, ValueError):
    code = "tip-outside"


class DegenerateX(BiopsyError, ValueError):
    code = "degenerate-x"


class UndefinedCorrelation(BiopsyError, ValueError):
    code = "undefined-correlation"


class UndefinedStd(BiopsyError, ValueError):
    code = "undefined-std"


class UnitError(BiopsyError, ValueError):
    code = "unit-error"


class InvalidSpec(BiopsyError, ValueError):
    code = "invalid-spec"


class EmptyComparison(BiopsyError, ValueError):
    code = "empty-comparison"


class FormatError(BiopsyError, ValueError):
    code = "format-error"

    def __init__(self, message: str = "", offset: int | None = None, **details):
        if offset is not None:
            details["offset"] = offset
            message = f"{message} (byte offset {offset})"
        super().__init__(message, **details)
        self.offset = offset


class IOFailure(BiopsyError, OSError):
    code = "io-error"
