"""Exception types shared across the package."""


class ContractViolation(ValueError):
    """An operation was called with arguments outside its contract."""


class ConfigError(ValueError):
    """Invalid experiment or network configuration."""

    def __init__(self, message, line=None, key=None):
        self.line = line
        self.key = key
        self.detail = message
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class FormatError(ValueError):
    """A file could not be decoded (bad header, unsupported layout)."""


class PointAtInfinityError(ArithmeticError):
    """A homogeneous point had a vanishing last coordinate."""


class DegenerateConfigurationError(ValueError):
    """Input geometry is degenerate (e.g. collinear camera centres)."""


class OutOfBoundsError(IndexError):
    """A sample location lies outside the image domain."""


class NonFiniteError(FloatingPointError):
    """A loss or gradient became NaN or infinite during optimisation."""

    def __init__(self, message, name=None, checkpoint=None):
        self.name = name
        self.checkpoint = checkpoint
        super().__init__(message)
