class InvalidInputError(ValueError):
    pass


class InvalidConfigError(ValueError):
    pass


class InvalidSpecError(ValueError):
    pass


class UndefinedMetricError(ValueError):
    """Raised when a metric is undefined for the given labels (e.g. one class only)."""


class NonFiniteLossError(RuntimeError):
    """Training produced a NaN/inf loss. ``diagnostics`` holds the step context."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = dict(diagnostics or {})


class DegenerateComparisonWarning(UserWarning):
    pass
