from typing import Optional


class ByzflError(ValueError):
    """Base class for every error raised by the simulator."""


class DimensionError(ByzflError):
    """Vector/matrix operands have incompatible lengths."""


class ParameterError(ByzflError):
    """An argument is outside its admissible range."""


class ConfigurationError(ByzflError):
    """A configuration is invalid; `field_path` points at the offending key."""

    def __init__(self, message: str, field_path: Optional[str] = None):
        self.field_path = field_path
        if field_path:
            message = f"{field_path}: {message}"
        super().__init__(message)


class DataError(ByzflError):
    """Dataset content is invalid (e.g. label out of range)."""


class ParseError(ByzflError):
    """A data or config file could not be parsed."""

    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class DivergenceError(ByzflError):
    """Training produced non-finite server state and the trial was asked to abort."""
