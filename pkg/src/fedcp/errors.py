"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Shapes or ranks of interacting arrays do not agree."""


class ParseError(ValueError):
    """A text input could not be parsed; carries the offending line number."""

    def __init__(self, message, line_no=None):
        if line_no is not None:
            message = f"line {line_no}: {message}"
        super().__init__(message)
        self.line_no = line_no


class ConfigError(ValueError):
    """A configuration key is unknown, malformed, or out of its domain."""


class ProtocolError(RuntimeError):
    """A federation round violated the one-upload-per-site contract."""


class NumericOverflowError(ArithmeticError):
    """An SGD update produced a non-finite factor row."""
