"""Exception types shared across the package."""


class CP2Error(Exception):
    """Base class for all errors raised by cp2."""


class InvalidInput(CP2Error, ValueError):
    pass


class InvalidConfig(CP2Error, ValueError):
    pass


class InvalidState(CP2Error, RuntimeError):
    pass


class GenerationFailed(CP2Error, RuntimeError):
    """A rejection sampler ran out of retries."""


class DegenerateMask(CP2Error, ValueError):
    """A mask has no foreground where at least one foreground cell is required."""


class IOFailure(CP2Error, OSError):
    pass


class IncompatibleCheckpoint(CP2Error, ValueError):
    pass


class NonFiniteLoss(CP2Error, FloatingPointError):
    """Raised by the training loop; carries the diagnostic payload."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
