"""Exception types shared across modules."""


class FinecastError(Exception):
    pass


class ShapeMismatchError(FinecastError, ValueError):
    pass


class NonFiniteError(FinecastError, ValueError):
    pass


class SpaceMismatchError(FinecastError, ValueError):
    """Operands live in different coordinate spaces (physical vs normalized)."""


class LayoutMismatchError(FinecastError, ValueError):
    """Operands describe different variable/level layouts."""


class DataGapError(FinecastError, LookupError):
    """A required timestamp is absent from an archive or store."""


class FormatError(FinecastError, ValueError):
    """A persisted artifact does not parse as the expected container."""


class VersionMismatchError(FormatError):
    pass


class ConfigError(FinecastError, ValueError):
    """Run configuration failed validation."""


class TrainingDivergedError(FinecastError, RuntimeError):
    """Training hit non-finite values; carries the last finite state.

    `state` holds the most recent good model state and `metrics` the log
    accumulated up to the abort, when the raiser had them.
    """

    def __init__(self, message: str, state=None, metrics=None):
        super().__init__(message)
        self.state = state
        self.metrics = metrics
