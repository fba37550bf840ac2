"""
errors.py

Exception hierarchy shared by the approximation library and the CLI.
- Input problems derive from ValueError (exit code 2)
- Numerical failures derive from RuntimeError (exit code 3)
- Resource budget violations derive from RuntimeError (exit code 4)
"""


class InvalidInputError(ValueError):
    """Shapes, covariances, weights or indices that violate an operation's preconditions."""


class DegreeTooHighError(InvalidInputError):
    """Requested moment or product order exceeds the supported maximum."""


class BundleFormatError(InvalidInputError):
    """Malformed tensor bundle on disk."""


class NumericalError(RuntimeError):
    """Base class for numerical failures."""


class DegenerateVarianceError(NumericalError):
    """Regression against a variable with (numerically) zero variance."""


class IllConditionedError(NumericalError):
    """Covariance system that stays singular after ridge escalation."""

    def __init__(self, message: str, condition: float = float("inf"), ridge: float = 0.0):
        super().__init__(message)
        self.condition = condition
        self.ridge = ridge


class FVUUndefinedError(NumericalError):
    """Network output has zero variance on the evaluation sample."""


class DivergenceError(NumericalError):
    """Stochastic optimization blew up; reduce the step size."""


class TrainingDivergedError(DivergenceError):
    """Non-finite training loss."""

    def __init__(self, message: str, step: int):
        super().__init__(message)
        self.step = step


class ResourceBudgetError(RuntimeError):
    """Feature dimension over the configured memory budget."""

    def __init__(self, message: str, dim: int = 0):
        super().__init__(message)
        self.dim = dim


class UseRefineError(ResourceBudgetError):
    """Closed-form mixture quadratic is gated off for this input dimension; use refine_quadratic."""


EXIT_CODES = (
    (ResourceBudgetError, 4),
    (NumericalError, 3),
    (InvalidInputError, 2),
)


def exit_code_for(exc: BaseException) -> int:
    """Map an exception to the CLI exit code (1 for anything unexpected)."""
    for cls, code in EXIT_CODES:
        if isinstance(exc, cls):
            return code
    return 1
