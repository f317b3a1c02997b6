"""Exception types shared across the package."""


class FlowGPError(Exception):
    """Base class for all errors raised by this package."""


class UsageError(FlowGPError):
    """An API contract was violated by the caller."""


class NonFiniteValue(FlowGPError):
    """A NaN or infinity showed up during evaluation.

    Carries enough context to localize the failure: the tape node id and
    operation that produced the value, and the bound term (ELL / KL /
    penalty) it belongs to when known.
    """

    def __init__(self, message, node_id=None, op=None, section=None):
        super().__init__(message)
        self.node_id = node_id
        self.op = op
        self.section = section


class NotPositiveDefinite(FlowGPError):
    """Cholesky factorization failed at every jitter level."""


class DomainError(FlowGPError):
    """A flow step was evaluated outside its domain."""

    def __init__(self, message, step_index=None):
        super().__init__(message)
        self.step_index = step_index


class RangeError(FlowGPError):
    """A value lies outside the range of an invertible map."""


class SingularJacobian(FlowGPError):
    """A flow derivative vanished where it must be nonzero."""


class ConvergenceError(FlowGPError):
    """An iterative routine failed to converge."""


class FlowNotUnconstrained(FlowGPError):
    """A flow with constrained output range was used where the full real
    line is required."""


class SchemaError(FlowGPError):
    """A config or data file violates its schema."""


class ValidationError(FlowGPError):
    """Input data failed validation."""


class FormatError(FlowGPError):
    """A persisted artifact has the wrong version or is corrupt."""
