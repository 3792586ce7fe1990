"""Data-driven EM starting points.

Random starts often end in a degenerate optimum where one state absorbs
the whole record. :func:`segment_init` instead cuts the record into short
contiguous blocks and clusters them by which per-state linear regression
explains them best (k-plane regression with random restarts), then reads
the generator off the block label sequence.
"""
import numpy as np

from .. import ctmc
from ..errors import DataError
from .params import ModelParams
from .posterior import unpack_psi

MIN_RATE = 1e-3


def _ridge_solve(x, dy, ridge):
    s = x.T @ x
    s[np.diag_indices_from(s)] += ridge * max(np.trace(s) / s.shape[0], 1e-300)
    return np.linalg.solve(s, x.T @ dy)


def _cluster(x, dy, blocks, k, rng, ridge, max_iter):
    nb = blocks.max() + 1
    labels = rng.permutation(np.arange(nb) % k)
    coef = None
    cost = np.inf
    for _ in range(max_iter):
        rows = labels[blocks]
        coef = [_ridge_solve(x[rows == l], dy[rows == l], ridge) for l in range(k)]
        err = np.stack([((dy - x @ c) ** 2).sum(axis=1) for c in coef], axis=1)
        per_block = np.zeros((nb, k))
        np.add.at(per_block, blocks, err)
        new = per_block.argmin(axis=1)
        # keep every state populated
        for l in range(k):
            if not np.any(new == l):
                gain = per_block[np.arange(nb), new] - per_block[:, l]
                new[int(np.argmax(gain))] = l
        cost = float(per_block[np.arange(nb), new].sum())
        if np.array_equal(new, labels):
            break
        labels = new
    return labels, coef, cost


def segment_init(y, psi, k, h=None, seed=None, block=None, restarts=10, ridge=1e-3, max_iter=50):
    """Starting parameters from block-wise regression clustering.

    ``block`` is the block length in intervals (default ``max(4, N // 24)``).
    The best of ``restarts`` random block labellings (lowest residual sum of
    squares) is kept. Rates are floored at 1e-3 so the start is irreducible.
    """
    psi_arr, h = unpack_psi(psi, h)
    if h is None or not h > 0:
        raise DataError("sampling period h must be given and positive")
    y = np.asarray(y.y if hasattr(y, "y") else y, dtype=float)
    n, p, m = psi_arr.shape
    return segment_init_arrays(psi_arr.reshape(n, p * m), np.diff(y, axis=0), k, m, h,
                               seed, block, restarts, ridge, max_iter)


def segment_init_arrays(x, dy, k, m, h, seed=None, block=None, restarts=10, ridge=1e-3, max_iter=50):
    """:func:`segment_init` on a flattened design ``x`` (N, pm) and increments ``dy`` (N, p)."""
    n, p = dy.shape
    if k < 1:
        raise DataError("k must be positive")
    if k == 1:
        coef = _ridge_solve(x, dy, ridge)
        theta = coef.T.reshape(1, p, p, m)
        sigma2 = max(float(((dy - x @ coef) ** 2).sum()) / (2 * p * n), 1e-12)
        return ModelParams(np.zeros((1, 1)), theta, sigma2)
    block = block or max(4, n // 24)
    blocks = np.arange(n) // block
    if blocks.max() + 1 < k:
        raise DataError(f"too few blocks ({blocks.max() + 1}) for k={k}")
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(restarts):
        labels, coef, cost = _cluster(x, dy, blocks, k, rng, ridge, max_iter)
        if best is None or cost < best[2]:
            best = (labels, coef, cost)
    labels, coef, _ = best
    rows = labels[blocks]
    theta = np.stack([c.T.reshape(p, p, m) for c in coef])
    resid = sum(((dy[rows == l] - x[rows == l] @ coef[l]) ** 2).sum() for l in range(k))
    sigma2 = max(float(resid) / (2 * p * n), 1e-12)
    counts = np.zeros((k, k))
    np.add.at(counts, (rows[:-1], rows[1:]), 1.0)
    np.fill_diagonal(counts, 0.0)
    dwell = np.bincount(rows, minlength=k) * h
    rates = np.maximum(counts / np.maximum(dwell, h)[:, None], MIN_RATE)
    q = ctmc.generator_from_rates(rates)
    return ModelParams(q, theta, sigma2)


def distinguishable(params, posterior_weight=None, rel=1e-6, min_weight=1.0):
    """Whether the states of a fit differ in drift and all carry weight.

    States are indistinguishable when two drift tensors agree to relative
    tolerance ``rel`` or a state's total posterior weight is below
    ``min_weight`` samples. Such a fit is a poor warm start.
    """
    theta = params.theta
    k = theta.shape[0]
    scale = 1.0 + float(np.abs(theta).max())
    for a in range(k):
        for b in range(a + 1, k):
            if np.abs(theta[a] - theta[b]).max() <= rel * scale:
                return False
    if posterior_weight is not None and k > 1:
        if np.asarray(posterior_weight).sum(axis=0).min() < min_weight:
            return False
    return True
