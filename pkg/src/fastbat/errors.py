"""Exception types shared across the package."""


class ContractViolation(ValueError):
    """An argument broke a documented precondition (shape, range, sign)."""


class UnsupportedOperation(TypeError):
    """A primitive outside the differentiable op set was recorded."""


class CGConvergenceError(RuntimeError):
    """Conjugate gradients did not reach the requested tolerance."""


class IndefiniteSystemError(RuntimeError):
    """Non-positive curvature met inside conjugate gradients."""


class IdxParseError(ValueError):
    """Malformed IDX file; the message names the offending byte offset."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class TrainingDiverged(RuntimeError):
    """A training step produced a non-finite loss or parameter."""
