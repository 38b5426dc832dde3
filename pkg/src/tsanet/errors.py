"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: validation problems exit 1, I/O and
file-format problems exit 2, anything else exits 3.
"""


class ValidationError(ValueError):
    """Input violates a documented precondition."""


class DimensionError(ValidationError):
    """Tensor shapes are incompatible for the requested operation."""


class AutodiffUsageError(RuntimeError):
    """Misuse of the autodiff tape (non-scalar loss, replayed graph)."""


class SequenceIOError(OSError):
    """A sequence directory is missing files or is internally inconsistent."""


class CheckpointFormatError(OSError):
    """A checkpoint file is truncated or carries a foreign header."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.message = message
        self.offset = offset
