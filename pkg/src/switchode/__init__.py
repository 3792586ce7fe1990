"""Sparse network inference for Markov-switching additive ODE systems."""
from . import ctmc, denoise, emfit, simulate
from .errors import (
    ConsistencyError,
    DataError,
    DegenerateStateError,
    DivergenceError,
    EvaluationError,
    NullEventError,
    NumericalError,
    ReducibleChainError,
    SelectionError,
    SwitchODEError,
)

__version__ = "0.1.0"
