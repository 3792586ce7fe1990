"""Gaussian increment emissions, smoothing, and CTMC expected statistics."""
from dataclasses import dataclass

import numpy as np

from .. import ctmc
from ..errors import DataError, NumericalError


@dataclass
class Posterior:
    """Smoothed latent-state probabilities.

    ``w[n-1, l] = P(Z(t_n) = l | Y)`` and
    ``pair[n-1, i, j] = P(Z(t_{n-1}) = i, Z(t_n) = j | Y)`` for n = 1..N.
    """

    w: np.ndarray
    pair: np.ndarray
    loglik: float

    @property
    def gamma0(self):
        """Marginal of the initial state Z(t_0)."""
        return self.pair[0].sum(axis=1)


def unpack_psi(psi, h=None):
    """Accept ``PsiFeatures`` or a raw (N, p, m) array; return ``(array, h)``."""
    if hasattr(psi, "psi"):
        return psi.psi, psi.h if h is None else h
    return np.asarray(psi, dtype=float), h


def _need_h(h):
    if h is None or not h > 0:
        raise DataError("sampling period h must be given and positive")
    return float(h)


def _check(y, psi):
    y = np.asarray(y, dtype=float)
    if y.ndim != 2 or y.shape[0] != psi.shape[0] + 1:
        raise DataError(f"y has shape {y.shape}; expected ({psi.shape[0] + 1}, p)")
    if y.shape[1] != psi.shape[1]:
        raise DataError("y and psi disagree on the number of nodes")
    return y


def mean_increments(theta, psi):
    """Predicted increments per state, shape (k, N, p)."""
    k, p, _, m = theta.shape
    flat = psi.reshape(psi.shape[0], p * m)
    return np.einsum("nc,lic->lni", flat, theta.reshape(k, p, p * m))


def residuals(y, psi, theta):
    dy = np.diff(y, axis=0)
    return dy[None] - mean_increments(theta, psi)


def emission_logmatrix(y, psi, params):
    """``log p(Y_n | Y_{n-1}, Z(t_n) = l)`` for all n = 1..N, shape (N, k)."""
    psi, _ = unpack_psi(psi)
    y = _check(y, psi)
    if not params.sigma2 > 0:
        raise DataError("sigma2 must be positive")
    r = residuals(y, psi, params.theta)
    p = y.shape[1]
    s2 = params.sigma2
    return (-0.5 * p * np.log(4 * np.pi * s2) - (r**2).sum(axis=2) / (4 * s2)).T


def emission_logdensity(y, psi, params, n, state):
    """Log density of ``Y_n`` given ``Y_{n-1}`` and ``Z(t_n) = state`` (1 <= n <= N)."""
    psi, _ = unpack_psi(psi)
    y = _check(y, psi)
    if not 1 <= n <= psi.shape[0]:
        raise DataError(f"n={n} outside 1..{psi.shape[0]}")
    if not params.sigma2 > 0:
        raise DataError("sigma2 must be positive")
    theta = params.theta[state]
    mean = y[n - 1] + np.einsum("ijm,jm->i", theta, psi[n - 1])
    r = y[n] - mean
    s2 = params.sigma2
    return float(-0.5 * y.shape[1] * np.log(4 * np.pi * s2) - (r @ r) / (4 * s2))


def _scaled_pass(loge, trans, init):
    """Scaled forward/backward recursions over emissions ``loge`` (n, k)."""
    n_steps, k = loge.shape
    shift = loge.max(axis=1)
    e = np.exp(loge - shift[:, None])
    alpha = np.empty((n_steps, k))
    beta = np.empty((n_steps, k))
    c = np.empty(n_steps)
    prev = init
    for n in range(n_steps):
        a = (prev @ trans) * e[n]
        c[n] = a.sum()
        if not (c[n] > 0 and np.isfinite(c[n])):
            raise NumericalError(f"forward recursion degenerate at observation {n + 1}")
        alpha[n] = a / c[n]
        prev = alpha[n]
    beta[-1] = 1.0
    for n in range(n_steps - 2, -1, -1):
        beta[n] = trans @ (e[n + 1] * beta[n + 1]) / c[n + 1]
    loglik = float(np.log(c).sum() + shift.sum())
    return alpha, beta, c, e, loglik


def _smooth(alpha, beta, c, e, trans, init):
    w = alpha * beta
    prev = np.vstack([init[None], alpha[:-1]])
    pair = prev[:, :, None] * trans[None] * (e * beta)[:, None, :] / c[:, None, None]
    return w, pair


def _chain(params, h, init=None):
    q = ctmc.as_rate_matrix(params.q)
    trans = ctmc.transition_matrix(q, h)
    if init is None:
        init = ctmc.stationary_distribution(q)
    return trans, np.asarray(init, dtype=float)


def forward_backward(y, psi, params, h=None, init=None, loge=None):
    """Exact smoothed marginals and pairwise probabilities.

    The latent chain is discretised with ``P = exp(Q h)`` and starts from
    the stationary distribution of ``Q`` unless ``init`` is given; the
    ``Y_0 | Z_0`` term is not modelled. ``loglik`` is ``log p(Y_1..Y_N | Y_0)``.
    """
    psi, h = unpack_psi(psi, h)
    h = _need_h(h)
    if loge is None:
        loge = emission_logmatrix(y, psi, params)
    if not np.all(np.isfinite(loge)):
        bad = int(np.argwhere(~np.isfinite(loge))[0, 0]) + 1
        raise NumericalError(f"non-finite emission density at observation {bad}")
    trans, init = _chain(params, h, init)
    alpha, beta, c, e, loglik = _scaled_pass(loge, trans, init)
    w, pair = _smooth(alpha, beta, c, e, trans, init)
    return Posterior(w, pair, loglik)


def truncated_posterior(y, psi, params, r, h=None, init=None, loge=None):
    """Smoothed probabilities at each t_n from the window ``Y_{n-r} .. Y_{n+r}``.

    Each window starts from the same initial law as the full smoother.
    For ``r >= N`` this is the full posterior.
    """
    if r < 1:
        raise DataError("truncation radius must be at least 1")
    psi, h = unpack_psi(psi, h)
    h = _need_h(h)
    if loge is None:
        loge = emission_logmatrix(y, psi, params)
    n_obs = loge.shape[0]
    if r >= n_obs:
        return forward_backward(y, psi, params, h, init=init, loge=loge)
    trans, init = _chain(params, h, init)
    k = trans.shape[0]
    w = np.empty((n_obs, k))
    pair = np.empty((n_obs, k, k))
    for n in range(1, n_obs + 1):
        lo, hi = max(n - r, 0), min(n + r, n_obs)
        # emissions lo+1..hi live in rows lo..hi-1
        alpha, beta, c, e, _ = _scaled_pass(loge[lo:hi], trans, init)
        ww, pp = _smooth(alpha, beta, c, e, trans, init)
        w[n - 1] = ww[n - lo - 1]
        pair[n - 1] = pp[n - lo - 1]
    *_, loglik = _scaled_pass(loge, trans, init)
    return Posterior(w, pair, loglik)


def endpoint_ratio(pair_sum, trans):
    """``pair_sum / P`` with null events (zero mass and zero probability) mapped to 0."""
    null = trans < ctmc.NULL_EVENT_FLOOR
    if np.any(pair_sum[null] > 0):
        raise NumericalError("posterior mass on an endpoint pair with zero transition probability")
    return np.where(null, 0.0, pair_sum / np.where(null, 1.0, trans))


def e_step_statistics(posterior, q, h):
    """Expected transition counts ``m_hat`` (k, k) and dwell times ``tau_hat`` (k).

    Sums endpoint-conditioned expectations over intervals, weighted by the
    smoothed pairwise probabilities.
    """
    q = ctmc.as_rate_matrix(q, check_irreducible=False)
    k = q.shape[0]
    pair_sum = posterior.pair.sum(axis=0)
    if k == 1:
        return np.zeros((1, 1)), np.array([pair_sum.sum() * h])
    trans = ctmc.transition_matrix(q, h)
    ratio = endpoint_ratio(pair_sum, trans)
    integrals = ctmc.endpoint_integrals(q, h)  # [l, lp, i, j]
    weighted = np.einsum("ij,abij->ab", ratio, integrals)
    tau_hat = np.diag(weighted).copy()
    m_hat = q * weighted
    np.fill_diagonal(m_hat, 0.0)
    return np.clip(m_hat, 0.0, None), tau_hat
