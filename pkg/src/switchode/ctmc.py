"""Continuous-time Markov chain kernel.

Stationary analysis, transition matrices, endpoint-conditioned expected
dwell times and transition counts (via Van Loan block exponentials), and
exact path sampling.
"""
from dataclasses import dataclass

import numpy as np
from scipy.linalg import expm

from .errors import DataError, NullEventError, ReducibleChainError

ROW_SUM_TOL = 1e-12
NULL_EVENT_FLOOR = 1e-300


def as_rate_matrix(q, check_irreducible=True, tol=ROW_SUM_TOL):
    """Validate ``q`` as a generator and return it as a float array.

    Off-diagonal entries must be non-negative and rows must sum to zero.
    Row-sum tolerance is scaled by the largest rate so that generators
    produced by floating point arithmetic pass.
    """
    q = np.array(q, dtype=float)
    if q.ndim != 2 or q.shape[0] != q.shape[1] or q.shape[0] < 1:
        raise DataError(f"rate matrix must be square, got shape {q.shape}")
    if not np.all(np.isfinite(q)):
        raise DataError("rate matrix has non-finite entries")
    off = q - np.diag(np.diag(q))
    if np.any(off < 0):
        raise ReducibleChainError("rate matrix has negative off-diagonal rates")
    scale = max(1.0, float(np.abs(q).max()))
    if np.any(np.abs(q.sum(axis=1)) > tol * scale):
        raise ReducibleChainError("rate matrix rows must sum to zero")
    if check_irreducible and not is_irreducible(q):
        raise ReducibleChainError("rate matrix is not irreducible")
    return q


def is_irreducible(q):
    """Strong connectivity of the positive off-diagonal rate graph."""
    q = np.asarray(q)
    k = q.shape[0]
    adj = (q > 0) & ~np.eye(k, dtype=bool)

    def reach(a):
        seen = {0}
        stack = [0]
        while stack:
            u = stack.pop()
            for v in np.flatnonzero(a[u]):
                if v not in seen:
                    seen.add(int(v))
                    stack.append(int(v))
        return len(seen) == k

    return reach(adj) and reach(adj.T)


def generator_from_rates(rates):
    """Build a generator from a matrix of off-diagonal rates."""
    q = np.array(rates, dtype=float)
    np.fill_diagonal(q, 0.0)
    np.fill_diagonal(q, -q.sum(axis=1))
    return q


def stationary_distribution(q):
    """Solve ``pi Q = 0`` with ``sum(pi) = 1`` for an irreducible generator."""
    q = as_rate_matrix(q)
    k = q.shape[0]
    if k == 1:
        return np.ones(1)
    a = np.vstack([q.T, np.ones(k)])
    b = np.zeros(k + 1)
    b[-1] = 1.0
    pi, *_ = np.linalg.lstsq(a, b, rcond=None)
    pi = np.clip(pi, 0.0, None)
    pi /= pi.sum()
    if np.any(pi <= 0):
        raise ReducibleChainError("stationary distribution has a zero entry")
    return pi


def transition_matrix(q, h):
    """``P(h) = exp(Q h)`` (Pade-13 scaling and squaring)."""
    q = as_rate_matrix(q, check_irreducible=False)
    if h < 0:
        raise DataError("time step must be non-negative")
    p = expm(q * h)
    # clip round-off negatives, keep rows stochastic
    p = np.clip(p, 0.0, None)
    return p / p.sum(axis=1, keepdims=True)


def van_loan_integral(q, h, l, lp):
    r"""Return ``\int_0^h e^{Qu} E_{l,lp} e^{Q(h-u)} du`` as a k x k matrix.

    Computed as the upper-right block of ``exp(h [[Q, E], [0, Q]])``.
    """
    q = as_rate_matrix(q, check_irreducible=False)
    k = q.shape[0]
    if h <= 0:
        raise DataError("van Loan integral requires h > 0")
    block = np.zeros((2 * k, 2 * k))
    block[:k, :k] = q
    block[k:, k:] = q
    block[l, k + lp] = 1.0
    return expm(block * h)[:k, k:]


def endpoint_integrals(q, h):
    """All Van Loan integrals at once.

    Returns ``I`` of shape (k, k, k, k) with
    ``I[l, lp, i, j] = int_0^h P_{il}(u) P_{lp j}(h-u) du``.
    """
    q = as_rate_matrix(q, check_irreducible=False)
    k = q.shape[0]
    out = np.empty((k, k, k, k))
    for l in range(k):
        for lp in range(k):
            out[l, lp] = van_loan_integral(q, h, l, lp)
    return out


def _endpoint_prob(q, h, i, j):
    pij = transition_matrix(q, h)[i, j]
    if pij < NULL_EVENT_FLOOR:
        raise NullEventError(f"P_{i}{j}({h}) = {pij:g}; cannot condition on a null event")
    return pij


def expected_dwell(q, h, i, j, l):
    """Expected time spent in ``l`` during [0, h] given Z(0)=i, Z(h)=j."""
    q = as_rate_matrix(q)
    pij = _endpoint_prob(q, h, i, j)
    if q.shape[0] == 1:
        return float(h)
    val = van_loan_integral(q, h, l, l)[i, j] / pij
    return float(min(max(val, 0.0), h))


def expected_transitions(q, h, i, j, l, lp):
    """Expected number of ``l -> lp`` jumps in [0, h] given Z(0)=i, Z(h)=j."""
    q = as_rate_matrix(q)
    if l == lp:
        raise DataError("expected_transitions requires l != lp")
    pij = _endpoint_prob(q, h, i, j)
    if q[l, lp] == 0:
        return 0.0
    val = q[l, lp] * van_loan_integral(q, h, l, lp)[i, j] / pij
    return float(max(val, 0.0))


def check_reversibility(q, tol=1e-10):
    """True iff ``pi_i q_ij == pi_j q_ji`` for all pairs."""
    q = as_rate_matrix(q)
    pi = stationary_distribution(q)
    flux = pi[:, None] * q
    return bool(np.all(np.abs(flux - flux.T) <= tol))


@dataclass(frozen=True)
class PathSample:
    """Piecewise-constant latent path on [0, T]."""

    jump_times: tuple
    states: tuple
    T: float

    def __post_init__(self):
        jt = np.asarray(self.jump_times, dtype=float)
        if len(self.states) != len(jt) + 1:
            raise DataError("states must have one more entry than jump_times")
        if jt.size and (np.any(np.diff(jt) <= 0) or jt[0] < 0 or jt[-1] > self.T):
            raise DataError("jump times must be strictly increasing within [0, T]")
        st = np.asarray(self.states)
        if st.size > 1 and np.any(st[1:] == st[:-1]):
            raise DataError("consecutive states must differ")

    def state_at(self, t):
        """State occupied at time(s) ``t`` (right-continuous)."""
        idx = np.searchsorted(np.asarray(self.jump_times), t, side="right")
        return np.asarray(self.states)[idx]

    def occupation(self, k):
        """Total time spent in each of ``k`` states."""
        edges = np.concatenate([[0.0], self.jump_times, [self.T]])
        out = np.zeros(k)
        np.add.at(out, np.asarray(self.states), np.diff(edges))
        return out

    def transition_counts(self, k):
        counts = np.zeros((k, k))
        st = np.asarray(self.states)
        np.add.at(counts, (st[:-1], st[1:]), 1.0)
        return counts

    def to_dict(self):
        return {
            "T": float(self.T),
            "jump_times": [float(t) for t in self.jump_times],
            "states": [int(s) for s in self.states],
        }

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(d["jump_times"]), tuple(d["states"]), float(d["T"]))


def sample_path(q, T, initial="stationary", seed=None):
    """Gillespie simulation of the chain on [0, T].

    ``initial`` is a state index or ``"stationary"``; ``seed`` may be an int,
    a ``SeedSequence`` or a ``Generator``.
    """
    q = as_rate_matrix(q)
    if T <= 0:
        raise DataError("horizon T must be positive")
    rng = np.random.default_rng(seed)
    k = q.shape[0]
    if isinstance(initial, str):
        if initial != "stationary":
            raise DataError(f"unknown initial spec {initial!r}")
        state = int(rng.choice(k, p=stationary_distribution(q)))
    else:
        state = int(initial)
        if not 0 <= state < k:
            raise DataError(f"initial state {state} out of range")
    exit_rates = -np.diag(q)
    jump_probs = np.where(
        exit_rates[:, None] > 0, q / np.where(exit_rates > 0, exit_rates, 1.0)[:, None], 0.0
    )
    np.fill_diagonal(jump_probs, 0.0)
    cum = np.cumsum(jump_probs, axis=1)
    times, states = [], [state]
    t = 0.0
    while exit_rates[state] > 0:
        t += rng.exponential(1.0 / exit_rates[state])
        if t >= T:
            break
        nxt = int(np.searchsorted(cum[state], rng.random() * cum[state, -1], side="right"))
        state = min(nxt, k - 1)
        times.append(t)
        states.append(state)
    return PathSample(tuple(times), tuple(states), float(T))
