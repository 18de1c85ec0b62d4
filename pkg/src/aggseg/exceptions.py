"""Exception hierarchy shared across the package."""


class AggSegError(Exception):
    """Base class for all package errors."""


class ConfigurationError(AggSegError, ValueError):
    """An invalid configuration value. ``field`` names the offending entry."""

    def __init__(self, field, message):
        self.field = field
        super().__init__(f"{field}: {message}")


class InputError(AggSegError, ValueError):
    pass


class CapabilityError(AggSegError, RuntimeError):
    pass


class DatasetError(AggSegError, ValueError):
    pass


class GenerationError(AggSegError, RuntimeError):
    pass


class TrainingError(AggSegError, RuntimeError):
    pass
