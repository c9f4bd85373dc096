"""Exception types shared across the package."""


class DiffTrackError(Exception):
    """Base class for all package-specific errors."""


class UnitError(DiffTrackError, ValueError):
    """Boxes with incompatible units (or a forbidden unit) were combined."""


class ShapeError(DiffTrackError, ValueError):
    """Tensor / grid shape does not match the declared contract."""


class ConfigError(DiffTrackError, ValueError):
    """Invalid configuration value (unknown key, out-of-range setting)."""


class DegenerateInputError(DiffTrackError, ValueError):
    """Input is degenerate for the requested operation (zero-area box, zero vector)."""


class InputError(DiffTrackError, ValueError):
    """Semantically invalid input (box outside frame, empty text where required)."""


class DataError(DiffTrackError, OSError):
    """Missing or unreadable data file."""


class ParseError(DiffTrackError, ValueError):
    """Malformed on-disk record; carries the offending line number."""

    def __init__(self, message, path=None, line=None):
        loc = ""
        if path is not None:
            loc += f"{path}"
        if line is not None:
            loc += f":{line}"
        super().__init__(f"{loc}: {message}" if loc else message)
        self.path = path
        self.line = line


class UndefinedMetricError(DiffTrackError, ValueError):
    """Metric requested on an empty input."""


class NumericsError(DiffTrackError, RuntimeError):
    """Non-finite value encountered where training cannot continue."""
