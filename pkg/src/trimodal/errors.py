"""Exception types shared across the package."""


class InvalidArgument(ValueError):
    """Bad shape, range or combination of arguments."""


class NumericalError(ArithmeticError):
    """A forward or backward pass produced NaN or Inf."""

    def __init__(self, message, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint


class FormatError(ValueError):
    """A file exists but its contents are not in the expected format."""


class ParseError(FormatError):
    def __init__(self, name, field, detail=""):
        self.name = name
        self.field = field
        msg = f"cannot parse {name!r}: bad {field}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class EmptyDatasetError(RuntimeError):
    pass


class SplitError(ValueError):
    pass


class CheckpointIncompatible(ValueError):
    pass


class ConfigError(ValueError):
    pass
