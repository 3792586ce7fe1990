"""Penalised EM for the switching additive ODE model.

One engine serves single-dataset fits and grouped fits, where several
recordings share the drift coefficients and noise level but each group of
recordings has its own generator.

The recorded objective is the penalised marginal log-likelihood
``log p(Y_1..Y_N | Y_0) - lam * pen(theta)``. The generator update maximises
the expected complete-data CTMC term including the initial-state law
``pi(Q)``: the closed-form rate estimate is used when it improves that term,
otherwise a backtracking step toward it is taken, which keeps every
iteration an ascent step.
"""
import logging
from dataclasses import dataclass, field

import numpy as np

from .. import ctmc
from ..errors import ConsistencyError, DataError, DegenerateStateError
from . import mstep
from .initialize import distinguishable, segment_init_arrays
from .params import ModelParams, init_params
from .posterior import (
    Posterior,
    e_step_statistics,
    forward_backward,
    truncated_posterior,
    unpack_psi,
)

log = logging.getLogger(__name__)

DEFAULT_GRID_SIZE = 100
DEFAULT_GRID_RANGE = (-7.0, -1.0)
DEFAULT_GRID_SEED = 0
INIT_STRATEGIES = ("segments", "random")
PENALTY_SCALES = ("per_sample", "absolute")


def penalty_weight(lam, n, sigma2, penalty_scale="per_sample"):
    """Multiplier of ``pen(theta)`` in the objective."""
    if penalty_scale == "per_sample":
        return lam * n / (2.0 * sigma2)
    return lam


def sigma2_update(rss, pen, lam, n, p, penalty_scale="per_sample", floor=mstep.SIGMA2_FLOOR):
    """Noise variance maximising the objective for fixed drift."""
    extra = 2.0 * lam * n * pen if penalty_scale == "per_sample" else 0.0
    return max((rss + extra) / (2.0 * p * n), floor)


@dataclass
class FitConfig:
    """EM settings.

    ``tol`` applies to the relative objective change ``|dF| / (1 + |F|)``.
    With ``penalty_scale="per_sample"`` the penalty enters the objective as
    ``lam * N / (2 sigma2) * pen(theta)``, i.e. ``lam`` weighs the penalty
    against the per-sample squared error ``(2N)^-1 rss``; the drift update
    then does not depend on ``sigma2``. ``"absolute"`` uses ``lam * pen``.
    ``trunc_r`` switches the E-step to windowed smoothing of radius r,
    which voids the ascent guarantee, so the monotonicity check is skipped.
    """

    lam: float = 0.0
    max_iter: int = 500
    tol: float = 1e-6
    trunc_r: int = None
    inner_tol: float = mstep.INNER_TOL
    max_sweeps: int = mstep.MAX_SWEEPS
    rate_floor: float = mstep.RATE_FLOOR
    sigma2_floor: float = mstep.SIGMA2_FLOOR
    monotone_slack: float = 1e-6
    penalty_scale: str = "per_sample"

    def __post_init__(self):
        if self.penalty_scale not in PENALTY_SCALES:
            raise DataError(f"penalty_scale must be one of {PENALTY_SCALES}")
        if not self.tol > 0:
            raise DataError("tol must be positive")
        if self.max_iter < 1:
            raise DataError("max_iter must be at least 1")
        if self.lam < 0:
            raise DataError("lambda must be non-negative")
        if self.trunc_r is not None and self.trunc_r < 1:
            raise DataError("trunc_r must be at least 1")


@dataclass
class FitResult:
    params: ModelParams
    loglik_trace: np.ndarray
    posterior: Posterior
    converged: bool
    iterations: int
    lam: float = 0.0
    unpenalized_objective: float = np.nan
    penalty: float = 0.0
    n_obs: int = 0
    inner: dict = field(default_factory=dict)

    @property
    def objective(self):
        return float(self.loglik_trace[-1])


@dataclass
class GroupedFitResult:
    """Shared ``theta`` and ``sigma2``; one generator per group label."""

    theta: np.ndarray
    sigma2: float
    q: dict
    groups: list
    member_groups: list
    loglik_trace: np.ndarray
    posteriors: list
    converged: bool
    iterations: int
    lam: float = 0.0
    unpenalized_objective: float = np.nan
    penalty: float = 0.0
    n_obs: int = 0

    def params_for(self, label):
        return ModelParams(self.q[label], self.theta, self.sigma2)


def _with_lam(config, lam):
    cfg = config or FitConfig()
    if lam is not None:
        cfg = FitConfig(**{**cfg.__dict__, "lam": float(lam)})
    return cfg


def as_member(y, psi, h=None):
    if hasattr(y, "y"):
        h = y.h if h is None else h
        y = y.y
    psi_arr, h_psi = unpack_psi(psi, h)
    h = h_psi if h_psi is not None else h
    if h is None or not h > 0:
        raise DataError("sampling period h must be given and positive")
    y = np.asarray(y, dtype=float)
    if y.ndim != 2 or y.shape[0] != psi_arr.shape[0] + 1 or y.shape[1] != psi_arr.shape[1]:
        raise DataError(f"y shape {y.shape} incompatible with psi shape {psi_arr.shape}")
    if psi_arr.shape[0] < 2:
        raise DataError("need N >= 2 intervals")
    return y, psi_arr, float(h)


def ctmc_surrogate(q, m_hat, tau_hat, gamma0=None):
    """``sum m log q - sum q_l tau_l`` (+ ``sum gamma0 log pi(q)`` if given)."""
    k = q.shape[0]
    if k == 1:
        return 0.0
    off = ~np.eye(k, dtype=bool)
    pos = off & (m_hat > 0)
    if np.any(q[pos] <= 0):
        raise DataError("zero rate where expected transitions are positive")
    val = float((m_hat[pos] * np.log(q[pos])).sum() + (np.diag(q) * tau_hat).sum())
    if gamma0 is not None:
        pi = ctmc.stationary_distribution(q)
        val += float((gamma0 * np.log(pi)).sum())
    return val


def _update_q(q_old, m_hat, tau_hat, gamma0, floor):
    q_hat = mstep.m_step_q(m_hat, tau_hat, floor=floor)
    if q_hat.shape[0] == 1:
        return q_hat
    base = ctmc_surrogate(q_old, m_hat, tau_hat, gamma0)
    t = 1.0
    while t > 2.0**-40:
        cand = (1.0 - t) * q_old + t * q_hat
        if ctmc_surrogate(cand, m_hat, tau_hat, gamma0) >= base:
            return cand
        t *= 0.5
    return q_old


def penalized_objective(y, psi, params, posterior, lam, m_hat=None, tau_hat=None, h=None, gram=None,
                        penalty_scale="per_sample"):
    """Expected complete-data log-likelihood minus the group penalty.

    ``sum m_hat log q - sum q_l tau_hat_l - (Np/2) log(4 pi sigma2)
    - rss_w / (4 sigma2) - c * pen(theta)``, with ``m_hat``/``tau_hat``
    computed from ``posterior`` and ``params.q`` unless supplied and
    ``c = penalty_weight(lam, N, sigma2, penalty_scale)``.
    """
    y, psi_arr, h = as_member(y, psi, h)
    if m_hat is None or tau_hat is None:
        m_hat, tau_hat = e_step_statistics(posterior, params.q, h)
    n, p, _ = psi_arr.shape
    val = ctmc_surrogate(params.q, np.asarray(m_hat), np.asarray(tau_hat))
    rss = mstep.weighted_rss(y, psi_arr, posterior.w, params.theta)
    val += -0.5 * n * p * np.log(4 * np.pi * params.sigma2) - rss / (4 * params.sigma2)
    if lam:
        if gram is None:
            gram = mstep.feature_gram(psi_arr)
        weight = penalty_weight(lam, n, params.sigma2, penalty_scale)
        val -= weight * mstep.group_penalty(params.theta, gram)
    return float(val)


def _e_step(members, gidx, qs, theta, sigma2, cfg):
    posts = []
    total = 0.0
    for (y, psi, h), g in zip(members, gidx):
        par = ModelParams(qs[g], theta, sigma2)
        if cfg.trunc_r is not None:
            post = truncated_posterior(y, psi, par, cfg.trunc_r, h)
        else:
            post = forward_backward(y, psi, par, h)
        posts.append(post)
        total += post.loglik
    return posts, total


def _em(members, gidx, qs, theta, sigma2, cfg, gram):
    """Shared EM loop. Returns final state, posteriors and bookkeeping."""
    n_groups = len(qs)
    p = theta.shape[1]
    n_total = sum(psi.shape[0] for _, psi, _ in members)
    lam = cfg.lam
    qs = [np.array(q, dtype=float) for q in qs]
    scale = cfg.penalty_scale
    posts, ll = _e_step(members, gidx, qs, theta, sigma2, cfg)
    pen = mstep.group_penalty(theta, gram)
    trace = [ll - penalty_weight(lam, n_total, sigma2, scale) * pen]
    converged = False
    inner = {}
    it = 0
    for it in range(1, cfg.max_iter + 1):
        # generator update, one per group
        stats = [e_step_statistics(post, qs[g], h) for post, g, (_, _, h) in zip(posts, gidx, members)]
        new_qs = []
        for g in range(n_groups):
            idx = [i for i, gg in enumerate(gidx) if gg == g]
            m_sum = sum(stats[i][0] for i in idx)
            tau_sum = sum(stats[i][1] for i in idx)
            g0 = sum(posts[i].gamma0 for i in idx)
            try:
                new_qs.append(_update_q(qs[g], m_sum, tau_sum, g0, cfg.rate_floor))
            except DegenerateStateError as exc:
                exc.iteration = it
                raise
        # pooled drift and noise updates
        s = c = wsum = 0.0
        for post, (y, psi, _) in zip(posts, members):
            s_i, c_i, w_i = mstep.sufficient_stats(y, psi, post.w)
            s, c, wsum = s + s_i, c + c_i, wsum + w_i
        theta, inner = mstep.solve_theta(
            s, c, wsum, gram, sigma2, penalty_weight(lam, n_total, sigma2, scale), theta,
            cfg.inner_tol, cfg.max_sweeps,
        )
        rss = sum(
            mstep.weighted_rss(y, psi, post.w, theta) for post, (y, psi, _) in zip(posts, members)
        )
        pen = mstep.group_penalty(theta, gram)
        sigma2 = sigma2_update(rss, pen, lam, n_total, p, scale, cfg.sigma2_floor)
        qs = new_qs
        posts, ll = _e_step(members, gidx, qs, theta, sigma2, cfg)
        f_new = ll - penalty_weight(lam, n_total, sigma2, scale) * pen
        f_old = trace[-1]
        trace.append(f_new)
        if cfg.trunc_r is None and f_new < f_old - cfg.monotone_slack * max(1.0, abs(f_old)):
            raise ConsistencyError(
                f"objective decreased from {f_old:.12g} to {f_new:.12g} at iteration {it}"
            )
        if abs(f_new - f_old) / (1.0 + abs(f_old)) < cfg.tol:
            converged = True
            break
    log.debug("EM stopped after %d iterations (converged=%s)", it, converged)
    return qs, theta, sigma2, posts, np.array(trace), converged, it, inner


def _unpenalized(members, gidx, qs, theta, sigma2, posts):
    total = 0.0
    for post, g, (y, psi, h) in zip(posts, gidx, members):
        total += penalized_objective(y, psi, ModelParams(qs[g], theta, sigma2), post, 0.0, h=h)
    return total


def fit(y, psi, k=None, m=None, lam=None, init=None, config=None, seed=None, h=None):
    """Fit one dataset by penalised EM.

    ``y`` is an (N+1, p) array or ``ObservationSet``; ``psi`` is
    ``PsiFeatures`` or an (N, p, m) array (then ``h`` is required).
    ``init`` is a ``ModelParams`` or a strategy name: ``"segments"``
    (default, block regression clustering) or ``"random"``
    (:func:`init_params`); both draw from ``seed``.
    """
    res = fit_grouped([(y, psi, 0)], k=k, m=m, lam=lam, init=init, config=config, seed=seed, h=h)
    params = res.params_for(0)
    return FitResult(
        params=params,
        loglik_trace=res.loglik_trace,
        posterior=res.posteriors[0],
        converged=res.converged,
        iterations=res.iterations,
        lam=res.lam,
        unpenalized_objective=res.unpenalized_objective,
        penalty=res.penalty,
        n_obs=res.n_obs,
    )


def fit_grouped(members, k=None, m=None, lam=None, init=None, config=None, seed=None, h=None):
    """Fit recordings with shared drift/noise and one generator per group.

    ``members`` is a list of ``(y, psi, label)``. ``init`` is a
    ``ModelParams`` (its generator seeds every group) or a dict mapping
    labels to ``ModelParams`` sharing theta and sigma2, or a strategy name
    as in :func:`fit`.
    """
    if not members:
        raise DataError("need at least one recording")
    cfg = _with_lam(config, lam)
    data, labels = [], []
    for entry in members:
        if len(entry) != 3:
            raise DataError("each member must be (y, psi, group_label)")
        yy, pp, label = entry
        data.append(as_member(yy, pp, h))
        labels.append(label)
    groups = list(dict.fromkeys(labels))
    gidx = [groups.index(lb) for lb in labels]
    p = data[0][1].shape[1]
    m_data = data[0][1].shape[2]
    if any(d[1].shape[1:] != (p, m_data) for d in data):
        raise DataError("all recordings must share (p, m)")
    if m is not None and m != m_data:
        raise DataError(f"m={m} but features have {m_data} basis functions")
    if init is None or isinstance(init, str):
        if k is None:
            raise DataError("either k or an init ModelParams is required")
        init = _initial_params(data, k, p, m_data, init or "segments", seed)
    if isinstance(init, dict):
        first = init[groups[0]]
        qs = [np.asarray(init[g].q, dtype=float) for g in groups]
    else:
        first = init
        qs = [np.asarray(init.q, dtype=float) for _ in groups]
    if k is not None and first.k != k:
        raise DataError(f"init has {first.k} states, expected {k}")
    if first.p != p or first.m != m_data:
        raise DataError("init shape disagrees with the features")
    for q in qs:
        ctmc.as_rate_matrix(q)
    psi_all = np.concatenate([d[1] for d in data])
    gram = mstep.feature_gram(psi_all)
    qs, theta, sigma2, posts, trace, converged, iters, _ = _em(
        data, gidx, qs, first.theta.copy(), first.sigma2, cfg, gram
    )
    return GroupedFitResult(
        theta=theta,
        sigma2=sigma2,
        q={g: qs[i] for i, g in enumerate(groups)},
        groups=groups,
        member_groups=labels,
        loglik_trace=trace,
        posteriors=posts,
        converged=converged,
        iterations=iters,
        lam=cfg.lam,
        unpenalized_objective=_unpenalized(data, gidx, qs, theta, sigma2, posts),
        penalty=mstep.group_penalty(theta, gram),
        n_obs=psi_all.shape[0],
    )


def _initial_params(data, k, p, m, strategy, seed):
    if strategy == "random":
        return init_params(k, p, m, seed)
    if strategy != "segments":
        raise DataError(f"init strategy must be one of {INIT_STRATEGIES}, got {strategy!r}")
    x = np.concatenate([d[1].reshape(d[1].shape[0], p * m) for d in data])
    dy = np.concatenate([np.diff(d[0], axis=0) for d in data])
    return segment_init_arrays(x, dy, k, m, data[0][2], seed)


def oracle_fit(y, psi, states, lam, config=None, q=None, theta_init=None, h=None):
    """Fit drift and noise with the latent states known.

    ``states`` holds the state at every sampling time t_0..t_N. The
    generator is ``q`` if given, else estimated from the sampled sequence
    (changes counted between consecutive samples, dwell = occupancy * h).
    Drift and noise are updated alternately until the objective settles.
    """
    cfg = _with_lam(config, lam)
    y, psi_arr, h = as_member(y, psi, h)
    states = np.asarray(states, dtype=int)
    n, p, m = psi_arr.shape
    if states.shape != (n + 1,):
        raise DataError(f"states must have length N+1={n + 1}")
    k = int(states.max()) + 1 if q is None else np.asarray(q).shape[0]
    eye = np.eye(k)
    w = eye[states[1:]]
    pair = eye[states[:-1]][:, :, None] * eye[states[1:]][:, None, :]
    post = Posterior(w, pair, np.nan)
    if q is None:
        counts = np.zeros((k, k))
        np.add.at(counts, (states[:-1], states[1:]), 1.0)
        np.fill_diagonal(counts, 0.0)
        dwell = np.bincount(states[1:], minlength=k) * h
        q = mstep.m_step_q(counts, np.maximum(dwell, 1e-12), floor=cfg.rate_floor) if k > 1 else np.zeros((1, 1))
    theta = np.zeros((k, p, p, m)) if theta_init is None else np.array(theta_init, dtype=float)
    gram = mstep.feature_gram(psi_arr)
    s, c, wsum = mstep.sufficient_stats(y, psi_arr, w)

    scale = cfg.penalty_scale

    def objective(theta, sigma2):
        rss = mstep.weighted_rss(y, psi_arr, w, theta)
        weight = penalty_weight(cfg.lam, n, sigma2, scale)
        return (-0.5 * n * p * np.log(4 * np.pi * sigma2) - rss / (4 * sigma2)
                - weight * mstep.group_penalty(theta, gram))

    def sigma_step(theta):
        rss = mstep.weighted_rss(y, psi_arr, w, theta)
        return sigma2_update(rss, mstep.group_penalty(theta, gram), cfg.lam, n, p, scale, cfg.sigma2_floor)

    sigma2 = sigma_step(theta)
    trace = [objective(theta, sigma2)]
    converged = False
    it = 0
    for it in range(1, cfg.max_iter + 1):
        theta, _ = mstep.solve_theta(
            s, c, wsum, gram, sigma2, penalty_weight(cfg.lam, n, sigma2, scale), theta,
            cfg.inner_tol, cfg.max_sweeps,
        )
        sigma2 = sigma_step(theta)
        trace.append(objective(theta, sigma2))
        if abs(trace[-1] - trace[-2]) / (1.0 + abs(trace[-2])) < cfg.tol:
            converged = True
            break
    params = ModelParams(q, theta, sigma2)
    return FitResult(
        params=params,
        loglik_trace=np.array(trace),
        posterior=post,
        converged=converged,
        iterations=it,
        lam=cfg.lam,
        unpenalized_objective=penalized_objective(y, psi_arr, params, post, 0.0, h=h),
        penalty=mstep.group_penalty(theta, gram),
        n_obs=n,
    )


def default_lambda_grid(size=DEFAULT_GRID_SIZE, low=DEFAULT_GRID_RANGE[0], high=DEFAULT_GRID_RANGE[1],
                        seed=DEFAULT_GRID_SEED):
    """``exp`` of ``size`` seeded uniform draws on ``[low, high]``, descending."""
    rng = np.random.default_rng(seed)
    return np.sort(np.exp(rng.uniform(low, high, size)))[::-1]


def lambda_path_fit(y, psi, k, m, lambdas, config=None, seed=None, init=None, h=None,
                    init_strategy="segments"):
    """Fits along a descending lambda path.

    Each fit warm-starts from the previous solution when its states are
    distinguishable (see :func:`distinguishable`); otherwise, and for the
    first fit unless ``init`` is given, it starts from ``init_strategy``.
    """
    lambdas = np.asarray(lambdas, dtype=float)
    if lambdas.ndim != 1 or lambdas.size == 0:
        raise DataError("lambdas must be a non-empty 1-D sequence")
    if np.any(np.diff(lambdas) > 0):
        raise DataError("lambdas must be sorted in descending order")
    cfg = config or FitConfig()
    results = []
    current = init
    for lam in lambdas:
        res = fit(y, psi, k=k, m=m, lam=lam, init=current or init_strategy, config=cfg, seed=seed, h=h)
        results.append(res)
        current = res.params if distinguishable(res.params, res.posterior.w) else None
    return results


def support(theta, epsilon_t=0.0):
    """Boolean (k, p, p) mask ``[l, i, j]``: ``||theta[l, i, j]||_2 > epsilon_t``."""
    if epsilon_t < 0:
        raise DataError("epsilon_t must be non-negative")
    theta = theta.theta if hasattr(theta, "theta") else np.asarray(theta)
    return mstep.block_norms(theta) > epsilon_t


def edge_set(params, epsilon_t=0.0):
    """Directed edges ``(j, i)`` (source j drives node i) per state."""
    mask = support(params, epsilon_t)
    return [{(int(j), int(i)) for i, j in zip(*np.nonzero(mask[l]))} for l in range(mask.shape[0])]
