"""Exception hierarchy shared by every layer of the package.

The CLI maps these onto process exit codes (see ``chunkstream.cli``).
"""

from __future__ import annotations


class ChunkStreamError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(ChunkStreamError, ValueError):
    """Operand dimensions do not agree."""


class DomainError(ChunkStreamError, ValueError):
    """An argument lies outside the domain of the operation."""


class ContractError(ChunkStreamError, ValueError):
    """A structural precondition was violated (e.g. a fully masked row)."""


class ChunkingError(ChunkStreamError, ValueError):
    """A streaming chunk had the wrong number of frames."""


class CapacityError(ChunkStreamError, ValueError):
    """The stream grew past the model's maximum context."""


class InsufficientInputError(ChunkStreamError, ValueError):
    """Not enough frames to fill the initial chunk."""


class StateError(ChunkStreamError, RuntimeError):
    """An operation was attempted on a finished or inconsistent state."""


class NumericError(ChunkStreamError, ArithmeticError):
    """A computation produced a non-finite value."""


class TrainingError(NumericError):
    """Fine-tuning diverged; ``step`` is the global step index."""

    def __init__(self, message: str, step: int):
        super().__init__(f"{message} (step {step})")
        self.step = step


class FormatError(ChunkStreamError, ValueError):
    """A file could not be parsed; ``offset`` is the byte offset when known."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} at byte offset {offset}"
        super().__init__(message)
        self.offset = offset


class UsageError(ChunkStreamError, ValueError):
    """Invalid combination of command-line options or config values."""
