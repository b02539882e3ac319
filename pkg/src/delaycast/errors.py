"""Exception types shared across the package."""


class DelaycastError(Exception):
    """Base class for all package errors."""


class ParseError(DelaycastError):
    """Malformed input file; carries the 1-based line number when known."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class GapError(DelaycastError):
    """Release sequence has holes; carries the missing release dates."""

    def __init__(self, missing_dates):
        self.missing_dates = list(missing_dates)
        dates = ", ".join(str(d) for d in self.missing_dates)
        super().__init__(f"missing releases for: {dates}")


class DomainError(DelaycastError):
    """Arguments outside the mathematical domain of an operation."""


class SizeError(DelaycastError):
    """Requested matrix exceeds the configured size cap."""


class NotPositiveDefiniteError(DelaycastError):
    """Cholesky failed even at the top of the jitter ladder."""


class ModelEvaluationError(DelaycastError):
    """Model density could not be evaluated; carries hyperparameter values."""

    def __init__(self, message, hyperparameters=None):
        self.hyperparameters = dict(hyperparameters or {})
        if self.hyperparameters:
            detail = ", ".join(f"{k}={v:.6g}" for k, v in self.hyperparameters.items())
            message = f"{message} ({detail})"
        super().__init__(message)


class InitializationError(DelaycastError):
    """Sampler could not leave its starting point during warm-up."""


class InterpolationError(DelaycastError):
    """Too few anchors for spline interpolation."""


class ConfigError(DelaycastError):
    """Bad configuration file contents."""
