"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(ValueError):
    """A precondition of an operation was violated."""


class ValidationError(ValueError):
    """Input data failed validation (bad file, unknown id, bad value)."""


class NumericError(RuntimeError):
    """A non-finite value appeared during training."""
