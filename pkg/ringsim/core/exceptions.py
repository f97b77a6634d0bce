from typing import Any, Dict, Optional

from ringsim.models.results import ErrorReport


class RingSimError(Exception):
    """Base class for every error the simulator reports."""

    code = "ringsim_error"
    exit_status = 1

    def __init__(self, message: str, details: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.message = message
        self.details = details or {}

    def to_report(self) -> ErrorReport:
        return ErrorReport(error=self.code, message=self.message, details=self.details or None)


class ValidationError(RingSimError):
    code = "invalid_input"
    exit_status = 2


class ScenarioError(ValidationError):
    code = "invalid_scenario"


class UndersampledError(ValidationError):
    code = "undersampled"


class AliasingError(ValidationError):
    code = "aliased_frequency"


class FitError(RingSimError):
    code = "fit_failed"


class LoopInactiveError(RingSimError):
    code = "loop_inactive"


class UnstableLoopError(RingSimError):
    code = "unstable_loop"


class CalibrationError(RingSimError):
    code = "calibration_failed"


class LockLossError(RingSimError):
    """Raised when the cw detuning stays outside the lock window too long.

    Carries the partial trace recorded up to the failure.
    """

    code = "lock_lost"

    def __init__(self, message: str, time_of_failure: float, trace=None,
                 details: Optional[Dict[str, Any]] = None):
        details = dict(details or {})
        details.setdefault("time_of_failure_s", time_of_failure)
        super().__init__(message, details)
        self.time_of_failure = time_of_failure
        self.trace = trace


class RegressionError(RingSimError):
    """A golden value moved outside its tolerance."""

    code = "golden_regression"
