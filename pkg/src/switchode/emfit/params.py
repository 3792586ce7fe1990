from dataclasses import dataclass

import numpy as np

from .. import ctmc
from ..errors import DataError


@dataclass
class ModelParams:
    """Generator ``q`` (k, k), drift tensor ``theta`` (k, p, p, m), noise ``sigma2``."""

    q: np.ndarray
    theta: np.ndarray
    sigma2: float

    def __post_init__(self):
        self.q = np.asarray(self.q, dtype=float)
        self.theta = np.asarray(self.theta, dtype=float)
        self.sigma2 = float(self.sigma2)
        if self.theta.ndim != 4 or self.theta.shape[1] != self.theta.shape[2]:
            raise DataError(f"theta must have shape (k, p, p, m), got {self.theta.shape}")
        if self.q.shape != (self.k, self.k):
            raise DataError("q and theta disagree on the number of states")
        if not np.all(np.isfinite(self.theta)):
            raise DataError("theta has non-finite entries")
        if not self.sigma2 > 0:
            raise DataError("sigma2 must be positive")

    @property
    def k(self):
        return self.theta.shape[0]

    @property
    def p(self):
        return self.theta.shape[1]

    @property
    def m(self):
        return self.theta.shape[3]

    def copy(self):
        return ModelParams(self.q.copy(), self.theta.copy(), self.sigma2)

    def permuted(self, perm):
        """Relabel states: new state ``l`` is old state ``perm[l]``."""
        perm = np.asarray(perm)
        return ModelParams(self.q[np.ix_(perm, perm)], self.theta[perm], self.sigma2)

    def validate(self, check_irreducible=True):
        ctmc.as_rate_matrix(self.q, check_irreducible=check_irreducible)
        return self

    def to_dict(self):
        return {
            "k": self.k,
            "p": self.p,
            "m": self.m,
            "q": {"shape": list(self.q.shape), "data": self.q.ravel().tolist()},
            "theta": {"shape": list(self.theta.shape), "data": self.theta.ravel().tolist()},
            "sigma2": self.sigma2,
        }

    @classmethod
    def from_dict(cls, d):
        try:
            q = np.asarray(d["q"]["data"], dtype=float).reshape(d["q"]["shape"])
            theta = np.asarray(d["theta"]["data"], dtype=float).reshape(d["theta"]["shape"])
            return cls(q, theta, d["sigma2"])
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"malformed parameter record: {exc}") from exc


def init_params(k, p, m, seed=None):
    """Random start: rates ``|Unif(-1, 0)|``, ``theta ~ N(0, I)``, ``sigma2 = 1``."""
    rng = np.random.default_rng(seed)
    rates = np.abs(rng.uniform(-1.0, 0.0, size=(k, k)))
    q = ctmc.generator_from_rates(rates) if k > 1 else np.zeros((1, 1))
    theta = rng.standard_normal((k, p, p, m))
    return ModelParams(q, theta, 1.0)
