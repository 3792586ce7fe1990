"""Exception hierarchy shared by all switchode modules."""


class SwitchODEError(Exception):
    """Base class for all package errors."""


class DataError(SwitchODEError, ValueError):
    """Malformed input: wrong shapes, invalid files, bad arguments."""


class ReducibleChainError(DataError):
    """Rate matrix is not irreducible (or not a valid generator)."""


class NullEventError(SwitchODEError, ValueError):
    """Conditioning on an endpoint pair with zero transition probability."""


class NumericalError(SwitchODEError, ArithmeticError):
    """Non-finite values or failed numerical invariants."""


class DivergenceError(NumericalError):
    """ODE trajectory left the bounded region."""

    def __init__(self, message, time=None):
        super().__init__(message)
        self.time = time


class DegenerateStateError(NumericalError):
    """A latent state receives zero expected occupation time."""

    def __init__(self, message, state=None, iteration=None):
        super().__init__(message)
        self.state = state
        self.iteration = iteration


class ConsistencyError(NumericalError):
    """EM objective decreased beyond numerical slack."""


class SelectionError(SwitchODEError, RuntimeError):
    """Every candidate fit in a grid search failed."""


class EvaluationError(SwitchODEError, ValueError):
    """Evaluation had no eligible inputs."""
