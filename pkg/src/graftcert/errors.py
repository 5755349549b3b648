"""Exception hierarchy shared across the package."""


class GraftcertError(Exception):
    """Base class for all errors raised by this package."""


class StructuralError(GraftcertError):
    """Shapes or layer wiring are inconsistent (e.g. dimension mismatch)."""


class DomainError(GraftcertError):
    """A value is outside the mathematical domain of the operation
    (non-finite input, negative radius, inverted clip range, ...)."""


class UsageError(GraftcertError):
    """The call violates an API precondition (bad neuron id, unknown
    method name, grafting an already-grafted neuron, ...)."""


class FormatError(GraftcertError):
    """A file could not be parsed (bad magic, truncated payload, ...)."""


class DivergenceError(GraftcertError):
    """Training produced a non-finite loss."""


class UndecidableRegion(GraftcertError):
    """The input-splitting oracle hit its resolution limit without
    proving or disproving the property.  Callers running cross-checks
    should treat this as a skip, not a failure."""


class PipelineError(GraftcertError):
    """A pipeline stage failed; the message names the stage."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"stage '{stage}' failed: {message}")
        self.stage = stage
