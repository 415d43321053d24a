"""Exception types.

The CLI maps these onto its exit-code contract: ``ValidationError`` -> 2,
``NumericalError`` (and subclasses) -> 3.
"""


class MFRBSDEError(Exception):
    """Base class for all package errors."""


class ValidationError(MFRBSDEError, ValueError):
    """Invalid input, configuration, or violated model precondition."""


class NumericalError(MFRBSDEError, ArithmeticError):
    """A computation failed: blow-up, singular design, non-contraction."""


class RegressionError(NumericalError):
    """Least-squares design is rank deficient beyond what ridge can rescue."""


class FeasibilityError(NumericalError):
    """A feasibility flow did not reach the constraint set or broke a bound."""


class ConsistencyError(NumericalError):
    """Stored arrays disagree with their recomputation."""
