"""Exception types shared across trapnet."""


class TrapnetError(Exception):
    pass


class ConfigError(TrapnetError, ValueError):
    """Invalid configuration or argument values."""


class ShapeError(TrapnetError, ValueError):
    pass


class DegenerateError(TrapnetError, ValueError):
    """A zero vector where a direction is required (cosine, signature, projection)."""


class NumericError(TrapnetError, ArithmeticError):
    pass


class TrainingError(TrapnetError, RuntimeError):
    def __init__(self, message, epoch=None):
        super().__init__(message)
        self.epoch = epoch


class FormatError(TrapnetError, ValueError):
    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class IsolationError(TrapnetError):
    """A signature-free attack was configured with access to the defender's signature."""


class HashMismatchError(TrapnetError):
    pass
