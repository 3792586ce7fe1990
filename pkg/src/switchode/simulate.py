"""Ground-truth switching-ODE trajectories and noisy observations."""
from dataclasses import dataclass, field

import numpy as np

from . import ctmc
from .errors import DataError, DivergenceError

BLOWUP_BOUND = 1e6
DEFAULT_FINE_EXPONENT = 14


@dataclass(frozen=True)
class BasisFamily:
    """Monomial basis ``g_i(x) = x**i`` for ``i = 1..m``."""

    m: int
    kind: str = "monomial"

    def __post_init__(self):
        if self.m < 1:
            raise DataError("basis needs at least one function")
        if self.kind != "monomial":
            raise DataError(f"unsupported basis kind {self.kind!r}")

    def eval(self, x):
        """Evaluate on any array; appends a trailing axis of length m."""
        x = np.asarray(x, dtype=float)
        powers = np.arange(1, self.m + 1)
        return x[..., None] ** powers

    def deriv(self, x):
        x = np.asarray(x, dtype=float)
        powers = np.arange(1, self.m + 1)
        return powers * x[..., None] ** (powers - 1)


@dataclass
class AdditiveODEModel:
    """Per-state additive drift ``dx_i/dt = sum_j theta[l, i, j] . g(x_j)``."""

    theta: np.ndarray
    basis: BasisFamily

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=float)
        if self.theta.ndim != 4 or self.theta.shape[1] != self.theta.shape[2]:
            raise DataError(f"theta must be (k, p, p, m), got {self.theta.shape}")
        if self.theta.shape[3] != self.basis.m:
            raise DataError("theta basis dimension does not match the basis")
        if not np.all(np.isfinite(self.theta)):
            raise DataError("theta has non-finite entries")

    @property
    def k(self):
        return self.theta.shape[0]

    @property
    def p(self):
        return self.theta.shape[1]

    @property
    def m(self):
        return self.theta.shape[3]


@dataclass
class SwitchingTrajectory:
    fine_times: np.ndarray
    x: np.ndarray
    z_path: ctmc.PathSample
    seed: object = None

    @property
    def switch_times(self):
        return np.asarray(self.z_path.jump_times)

    @property
    def T(self):
        return self.z_path.T


@dataclass
class ObservationSet:
    """Noisy samples ``y[n] = x(t_n) + sigma * eps_n`` at ``t_n = n h``."""

    y: np.ndarray
    h: float
    sigma_true: float = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=float)
        if self.y.ndim == 1:
            self.y = self.y[:, None]
        if self.y.shape[0] < 3:
            raise DataError("need at least N = 2 intervals (3 samples)")
        if not np.all(np.isfinite(self.y)):
            raise DataError("observations contain non-finite values")
        if self.h <= 0:
            raise DataError("sampling period must be positive")

    @property
    def N(self):
        return self.y.shape[0] - 1

    @property
    def p(self):
        return self.y.shape[1]

    @property
    def T(self):
        return self.N * self.h

    @property
    def times(self):
        return np.arange(self.N + 1) * self.h


def drift(model, x, state):
    """Right-hand side of the ODE in latent state ``state``."""
    if not 0 <= state < model.k:
        raise DataError(f"state {state} out of range for k={model.k}")
    g = model.basis.eval(x)  # (p, m)
    return np.einsum("ijm,jm->i", model.theta[state], g)


def _rk4_step(model, x, state, dt):
    k1 = drift(model, x, state)
    k2 = drift(model, x + 0.5 * dt * k1, state)
    k3 = drift(model, x + 0.5 * dt * k2, state)
    k4 = drift(model, x + dt * k3, state)
    return x + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)


def integrate(model, q, x0, T, dt_fine=None, seed=None, path=None):
    """Integrate the switching ODE on a uniform fine grid over [0, T].

    The latent path is sampled from ``q`` (stationary start) unless ``path``
    is given. RK4 steps are split at every switch time so no step straddles
    a jump. Raises ``DivergenceError`` once ``max|x|`` exceeds 1e6.
    """
    if T <= 0:
        raise DataError("T must be positive")
    if dt_fine is None:
        dt_fine = T / 2**DEFAULT_FINE_EXPONENT
    if dt_fine <= 0:
        raise DataError("dt_fine must be positive")
    x0 = np.asarray(x0, dtype=float)
    if x0.shape != (model.p,):
        raise DataError(f"x0 must have length {model.p}")
    if path is None:
        path = ctmc.sample_path(q, T, "stationary", seed)
    n_steps = max(1, int(round(T / dt_fine)))
    times = np.linspace(0.0, T, n_steps + 1)
    xs = np.empty((n_steps + 1, model.p))
    xs[0] = x0
    jumps = np.asarray(path.jump_times)
    states = np.asarray(path.states)
    x = x0.copy()
    jump_idx = 0
    for s in range(n_steps):
        t0, t1 = times[s], times[s + 1]
        t = t0
        while jump_idx < jumps.size and jumps[jump_idx] < t1:
            tj = jumps[jump_idx]
            if tj > t:
                x = _rk4_step(model, x, int(states[jump_idx]), tj - t)
                t = tj
            jump_idx += 1
        x = _rk4_step(model, x, int(states[jump_idx]), t1 - t)
        if not np.all(np.isfinite(x)) or np.abs(x).max() > BLOWUP_BOUND:
            raise DivergenceError(f"trajectory diverged at t={t1:.6g}", time=t1)
        xs[s + 1] = x
    return SwitchingTrajectory(times, xs, path, seed)


def sample_trajectory(traj, times):
    """Linear interpolation of the fine-grid trajectory at ``times``."""
    times = np.asarray(times, dtype=float)
    return np.column_stack(
        [np.interp(times, traj.fine_times, traj.x[:, i]) for i in range(traj.x.shape[1])]
    )


def observe(traj, N, sigma, seed=None):
    """Sample ``N + 1`` uniform noisy observations of ``traj`` over [0, T]."""
    if N < 2:
        raise DataError("N must be at least 2")
    if sigma < 0:
        raise DataError("sigma must be non-negative")
    T = traj.T
    times = np.arange(N + 1) * (T / N)
    times[-1] = T
    clean = sample_trajectory(traj, times)
    rng = np.random.default_rng(seed)
    y = clean + sigma * rng.standard_normal(clean.shape)
    return ObservationSet(y, T / N, sigma, {"N": N, "T": T, "sigma": sigma})


DGP_Q = np.array([[-0.27, 0.27], [0.18, -0.18]])
DGP_SIGMA = 0.01
DGP_T = 40.0


def dgp1():
    """Nonlinear 10-node, two-state benchmark with cubic monomial basis."""
    p, m = 10, 3
    theta = np.zeros((2, p, p, m))
    # one 2x2 coupled-pair template, placed on node pairs (1,2),(3,4),(5,6)
    # in state 1 and (5,6),(7,8),(9,10) in state 2 (1-based)
    blocks = [
        {(0, 0): (1.2, 0.3, -0.6), (0, 1): (0.1, 0.2, 0.2),
         (1, 0): (-2.0, 0.0, 0.4), (1, 1): (0.5, 0.2, -0.3)},
        {(0, 1): (-0.3, 0.4, 0.1), (1, 0): (0.2, -0.1, -0.2)},
        {(0, 1): (0.1, 0.0, -0.8), (1, 0): (0.0, 0.0, 0.5)},
    ]
    for state, offsets in ((0, (0, 2, 4)), (1, (4, 6, 8))):
        for block, off in zip(blocks, offsets):
            for (a, b), vals in block.items():
                theta[state, off + a, off + b] = vals
    x0 = np.array([-2, 2, 2, -2, -1.5, 1.5, -1, 1, 1, -1], dtype=float)
    return AdditiveODEModel(theta, BasisFamily(m)), DGP_Q.copy(), x0


def dgp2():
    """Linear 20-node benchmark: four stars in state 1, a ring in state 2."""
    p = 20
    w = 0.8 * np.pi
    theta = np.zeros((2, p, p, 1))
    for s in range(4):
        hub = 5 * s
        for leaf in range(hub + 1, hub + 5):
            theta[0, leaf, hub, 0] = -w
            theta[0, hub, leaf, 0] = w
    for i in range(p):
        theta[1, i, (i - 1) % p, 0] = -w
        theta[1, i, (i + 1) % p, 0] = w
    # generic start: an alternating vector is a fixed point of the ring and
    # leaves the ring state unexcited
    x0 = np.array([
        -0.66, -0.12, -1.13, 0.07, -0.27, -1.29, -1.2, 1.46, 0.58, -0.15,
        0.42, -0.69, -0.59, -1.28, -1.34, 0.92, 0.94, -1.49, -0.51, -1.23,
    ])
    return AdditiveODEModel(theta, BasisFamily(1)), DGP_Q.copy(), x0


DGPS = {"dgp1": dgp1, "dgp2": dgp2}
