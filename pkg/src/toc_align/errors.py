"""Exception hierarchy shared by all modules."""


class AlignmentError(Exception):
    """Base class for every error raised by this package."""


class ValidationError(AlignmentError, ValueError):
    """Inputs violate a documented precondition."""


class NumericalError(AlignmentError, ArithmeticError):
    """A computation could not be completed reliably."""


class SingularityError(NumericalError):
    """A linear system is rank deficient beyond the conditioning guard."""

    def __init__(self, message, condition_number=float("inf")):
        super().__init__(message)
        self.condition_number = condition_number


class DivergenceError(NumericalError):
    """Iterative training kept increasing its loss."""

    def __init__(self, message, loss_trace=()):
        super().__init__(message)
        self.loss_trace = list(loss_trace)


class DegenerateFeatureError(NumericalError):
    """A feature vector has (numerically) zero norm."""

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index
