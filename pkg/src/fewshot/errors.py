"""Exception taxonomy shared by every fewshot module."""


class FewshotError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(FewshotError, ValueError):
    """Array shapes are incompatible with the requested operation."""


class ConfigurationError(FewshotError, ValueError):
    """A hyperparameter or config value is invalid or inconsistent."""


class UsageError(FewshotError, ValueError):
    """The caller invoked an operation outside its contract."""


class StateError(FewshotError, RuntimeError):
    """Mutable state (e.g. running statistics) is missing or stale."""


class DataError(FewshotError, RuntimeError):
    """A dataset, split or file violates the expected layout."""


class InputError(FewshotError, ValueError):
    """An input array has the wrong channel count or spatial size."""


class DivergenceError(FewshotError, RuntimeError):
    """Training produced a non-finite loss."""
