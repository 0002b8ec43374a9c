"""Exception hierarchy shared by every module."""


class DDEQError(Exception):
    """Base class for all errors raised by this package."""


class DimensionMismatch(DDEQError, ValueError):
    pass


class ShapeError(DDEQError, ValueError):
    pass


class DegenerateSpread(DDEQError, ValueError):
    pass


class EmptyPartial(DDEQError, ValueError):
    pass


class ParseError(DDEQError, ValueError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class SchemaError(DDEQError, ValueError):
    pass


class ConfigError(DDEQError, ValueError):
    pass


class AllSourcesMasked(DDEQError, ValueError):
    pass


class AllMasked(DDEQError, ValueError):
    pass


class OddLatentDim(DDEQError, ValueError):
    pass


class NotScalarOutput(DDEQError, ValueError):
    pass


class NonFiniteGradient(DDEQError, FloatingPointError):
    """Raised when a flow or training step produces NaN/Inf gradients."""

    def __init__(self, message, step=None):
        self.step = step
        if step is not None:
            message = f"{message} (step {step})"
        super().__init__(message)


class AllTermsSkipped(DDEQError, ValueError):
    pass


class UnsupportedScale(DDEQError, ValueError):
    pass
