"""Exception hierarchy shared across the package."""


class TrustDDError(Exception):
    pass


class LoadError(TrustDDError):
    """A dataset or container file is missing or unreadable."""


class ValidationError(TrustDDError, ValueError):
    pass


class InitializationError(TrustDDError, ValueError):
    pass


class FormatError(TrustDDError):
    """A persisted container is truncated or malformed."""


class IncompatibleFormatError(FormatError):
    pass


class CorruptionError(TrustDDError, ValueError):
    pass


class ConfigError(TrustDDError, ValueError):
    pass


class SpecError(TrustDDError, ValueError):
    pass


class NumericError(TrustDDError, FloatingPointError):
    pass


class TrainingError(TrustDDError):
    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class DegenerateTrajectoryError(TrustDDError):
    pass


class DistillationAborted(TrustDDError):
    def __init__(self, message, iteration=None, telemetry=None):
        super().__init__(message)
        self.iteration = iteration
        self.telemetry = telemetry or []


class PartialReportError(TrustDDError):
    def __init__(self, message, failures):
        super().__init__(message)
        self.failures = list(failures)
