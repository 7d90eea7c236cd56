"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Raised when tensor extents do not satisfy an operation's shape law."""


class DomainError(ValueError):
    """Raised when a value lies outside an operation's mathematical domain."""


class GraphError(RuntimeError):
    """Raised on misuse of the recorded computation graph."""


class ConfigError(ValueError):
    """Raised for invalid model or training configuration."""


class ParseError(ValueError):
    """Raised for malformed binary or text input.

    ``offset`` is the byte position at which parsing failed.
    """

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class NonFiniteError(FloatingPointError):
    """Raised when training produces NaN/Inf; ``module`` names the first culprit."""

    def __init__(self, message: str, module: str | None = None):
        super().__init__(message)
        self.module = module
