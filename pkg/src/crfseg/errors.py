"""Exception types shared across the package.

The CLI maps these onto its exit-code contract: usage/format problems
exit 2, numerical check failures exit 1.
"""


class InvalidArgumentError(ValueError):
    """An argument violates a documented precondition."""


class FormatError(ValueError):
    """A file or byte stream does not match its expected format.

    ``byte_offset`` is set when the failure position in the stream is
    known (binary formats); it stays None for opaque decoder errors.
    """

    def __init__(self, message, path=None, byte_offset=None):
        detail = message
        if path is not None:
            detail = f"{path}: {detail}"
        if byte_offset is not None:
            detail = f"{detail} (at byte {byte_offset})"
        super().__init__(detail)
        self.path = path
        self.byte_offset = byte_offset


class SolverConvergenceError(RuntimeError):
    """Gauss-Seidel failed to reach the requested residual."""

    def __init__(self, message, channel=None, residual=None, iterations=None):
        super().__init__(message)
        self.channel = channel
        self.residual = residual
        self.iterations = iterations


class PipelineStageError(RuntimeError):
    """Wraps a failure with the name of the pipeline stage it came from."""

    def __init__(self, stage, cause):
        super().__init__(f"stage '{stage}': {cause}")
        self.stage = stage
        self.cause = cause
