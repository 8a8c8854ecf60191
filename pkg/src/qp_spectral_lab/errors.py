"""
Exception hierarchy of the lab.

Validation problems map to exit status 2, numerical failures to exit status 3.
Every error carries a machine-readable kind and a details mapping.
"""

from typing import Any

from qp_spectral_lab.constants import ErrorKinds, ExitCodes


class LabError(Exception):
    """Base class for all lab errors."""

    kind: str = ErrorKinds.VALIDATION
    exit_code: int = ExitCodes.NUMERICAL

    def __init__(self, message: str, **details: Any):
        super().__init__(message)
        self.message = message
        self.details = details

    def to_payload(self) -> dict[str, Any]:
        """
        Render the error as a JSON-compatible mapping.
        :return: Payload with kind, message and details
        """
        return {
            "kind": self.kind,
            "message": self.message,
            "details": self.details,
        }


class ValidationFailure(LabError, ValueError):
    kind = ErrorKinds.VALIDATION
    exit_code = ExitCodes.VALIDATION


class DimensionMismatchError(ValidationFailure):
    kind = ErrorKinds.DIMENSION_MISMATCH


class InfeasiblePavingError(ValidationFailure):
    kind = ErrorKinds.INFEASIBLE_PAVING


class RegionTooLargeError(ValidationFailure):
    kind = ErrorKinds.REGION_TOO_LARGE


class NotDualizableError(ValidationFailure):
    kind = ErrorKinds.NOT_DUALIZABLE


class NumericalFailure(LabError):
    exit_code = ExitCodes.NUMERICAL


class CorruptCoefficientsError(NumericalFailure):
    kind = ErrorKinds.CORRUPT_COEFFICIENTS


class SingularResolventError(NumericalFailure):
    kind = ErrorKinds.SINGULAR


class DivergedError(NumericalFailure):
    kind = ErrorKinds.DIVERGED


class UncoveredPointError(NumericalFailure):
    kind = ErrorKinds.UNCOVERED_POINT


class HypothesisViolatedError(NumericalFailure):
    kind = ErrorKinds.HYPOTHESIS_VIOLATED


class NoGoodAnnulusError(NumericalFailure):
    kind = ErrorKinds.NO_GOOD_ANNULUS


class EigenSolverError(NumericalFailure):
    kind = ErrorKinds.EIGEN_SOLVER


class SweepFailureError(NumericalFailure):
    kind = ErrorKinds.SWEEP_FAILURES
