"""Exception types shared across the package."""


class ValidationError(ValueError):
    """Raised when an input violates a documented precondition."""


class ResidualMassError(ValidationError):
    """Rejection was reached where the residual distribution has no mass."""


class InfiniteLossError(ArithmeticError):
    """A divergence is infinite because absolute continuity fails."""


class TrainingError(RuntimeError):
    """Training produced a non-finite quantity.

    ``step`` carries the index of the offending optimizer step.
    """

    def __init__(self, message, step=None):
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step


class InstanceTooLarge(ValueError):
    """An exact enumeration was asked for an instance above the size bound."""
