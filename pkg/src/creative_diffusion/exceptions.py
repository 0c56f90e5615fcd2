"""Exception types raised across the package."""


class ConfigError(ValueError):
    """Invalid configuration value or combination.

    ``errors`` holds one message per offending field when several are known.
    """

    def __init__(self, message, errors=None):
        self.errors = list(errors or [])
        if self.errors:
            message = message + "\n" + "\n".join(f"  - {e}" for e in self.errors)
        super().__init__(message)


class ShapeError(ValueError):
    pass


class DomainError(ValueError):
    pass


class RangeError(IndexError):
    pass


class ScheduleError(ValueError):
    pass


class DataError(ValueError):
    pass


class NumericError(FloatingPointError):
    """Non-finite value produced during sampling or training."""

    def __init__(self, message, **context):
        self.context = context
        if context:
            details = ", ".join(f"{k}={v}" for k, v in context.items())
            message = f"{message} ({details})"
        super().__init__(message)


class ScorerUnavailable(RuntimeError):
    """A scorer plugin cannot run, e.g. because its weights are missing."""
