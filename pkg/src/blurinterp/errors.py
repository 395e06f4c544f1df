"""Exception taxonomy shared across the package."""


class BlurinterpError(Exception):
    """Base class for all package-specific errors."""


class ShapeError(BlurinterpError):
    """An array had a rank or extent the operation cannot accept."""


class ConfigError(BlurinterpError):
    """A configuration value is out of range or inconsistent."""


class CheckpointFormatError(BlurinterpError):
    """A weight file is truncated, corrupt, or of an unknown version."""


class DomainError(BlurinterpError):
    """A runtime value (e.g. a time query) is outside its legal range."""


class ModeError(BlurinterpError):
    """An operation was invoked in a mode that forbids it."""


class DivergenceError(BlurinterpError):
    """Training produced a non-finite loss."""
