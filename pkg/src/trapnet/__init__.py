"""Trapdoor-signature adversarial-example detector and adaptive attacks against it."""

from .errors import (
    ConfigError,
    DegenerateError,
    FormatError,
    HashMismatchError,
    IsolationError,
    NumericError,
    ShapeError,
    TrainingError,
    TrapnetError,
)

__version__ = "0.1.0"
