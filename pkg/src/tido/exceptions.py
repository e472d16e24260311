"""Package-wide error types."""


class TrainingDiverged(RuntimeError):
    """A training loop hit a non-finite loss or gradient.

    ``last_state`` carries the last finite checkpoint when one exists
    (the pre-increment state for incremental updates), so callers can
    roll back instead of keeping a corrupted model.
    """

    def __init__(self, message, last_state=None, log=None):
        super().__init__(message)
        self.last_state = last_state
        self.log = log


class GenerationError(RuntimeError):
    """Rejection sampling exhausted its retry budget."""


class CsvFormatError(ValueError):
    """A dataset file violates the CSV contract; message names the line."""
