"""M-step updates: generator, group-sparse drift coefficients, noise variance.

The drift update solves, separately for each state ``l`` and node ``i``,

    min_b  (4 sigma2)^-1 sum_n w_l(t_n) (dy_ni - x_n . b)^2 + lam sum_j ||b_j||_{K_j}

with ``x_n = psi[n].ravel()``, ``b_j`` the m coefficients of source node j and
``||v||_K^2 = v' K v`` for the feature Gram ``K_j = N^-1 sum_n psi_nj psi_nj'``.
Substituting ``phi_j = K_j^{1/2} b_j`` turns the penalty into a plain group
lasso, solved by exact block coordinate descent. All nodes of one state share
the same design and weights, so the p problems are solved column-wise at once.
"""
import warnings

import numpy as np

from .. import ctmc
from ..errors import DataError, DegenerateStateError
from .posterior import unpack_psi

SIGMA2_FLOOR = 1e-12
RATE_FLOOR = 1e-10
GRAM_RIDGE = 1e-10
FROZEN_WEIGHT = 1e-8
INNER_TOL = 1e-9
MAX_SWEEPS = 10_000


def m_step_q(m_hat, tau_hat, floor=0.0):
    """Closed-form generator ``q[l, l'] = m_hat[l, l'] / tau_hat[l]``.

    ``floor`` lifts off-diagonal rates so the chain stays irreducible when
    expected counts underflow.
    """
    m_hat = np.asarray(m_hat, dtype=float)
    tau_hat = np.asarray(tau_hat, dtype=float)
    k = tau_hat.size
    if m_hat.shape != (k, k):
        raise DataError("m_hat and tau_hat disagree on the number of states")
    bad = np.flatnonzero(~(tau_hat > 0))
    if bad.size:
        raise DegenerateStateError(f"state {bad[0]} has zero expected dwell time", state=int(bad[0]))
    rates = np.clip(m_hat, 0.0, None) / tau_hat[:, None]
    if floor > 0:
        rates = np.maximum(rates, floor)
    return ctmc.generator_from_rates(rates)


def feature_gram(psi, ridge=GRAM_RIDGE):
    """Per-source feature Gram ``K_j`` (p, m, m), ridged with a warning if singular."""
    psi, _ = unpack_psi(psi)
    gram = np.einsum("nja,njb->jab", psi, psi) / psi.shape[0]
    return _ridge(gram, ridge)


def _ridge(gram, ridge):
    ev = np.linalg.eigvalsh(gram)
    singular = ev[:, 0] <= 1e-12 * np.maximum(1.0, ev[:, -1])
    if np.any(singular):
        warnings.warn(
            f"feature Gram singular for sources {np.flatnonzero(singular).tolist()}; "
            f"adding {ridge:g} * I",
            RuntimeWarning,
            stacklevel=3,
        )
        gram = gram.copy()
        gram[singular] += ridge * np.eye(gram.shape[1])
    return gram


def _gram_roots(gram):
    """``K_j^{1/2}`` and ``K_j^{-1/2}`` for every source."""
    ev, vec = np.linalg.eigh(gram)
    ev = np.clip(ev, 0.0, None)
    root = np.einsum("jab,jb,jcb->jac", vec, np.sqrt(ev), vec)
    inv = np.einsum("jab,jb,jcb->jac", vec, 1.0 / np.sqrt(ev), vec)
    return root, inv


def group_penalty(theta, gram):
    """``sum_{l,i,j} ||theta[l, i, j]||_{K_j}``."""
    quad = np.einsum("lija,jab,lijb->lij", theta, gram, theta)
    return float(np.sqrt(np.clip(quad, 0.0, None)).sum())


def block_norms(theta, gram=None):
    """Euclidean (or ``K_j``-metric) norm of every block, shape (k, p, p)."""
    if gram is None:
        return np.linalg.norm(theta, axis=-1)
    quad = np.einsum("lija,jab,lijb->lij", theta, gram, theta)
    return np.sqrt(np.clip(quad, 0.0, None))


def sufficient_stats(y, psi, w):
    """Weighted cross products per state.

    Returns ``S`` (k, pm, pm) with ``S_l = X' W_l X``, ``C`` (k, pm, p) with
    ``C_l = X' W_l dY`` and the weight sums (k,).
    """
    psi, _ = unpack_psi(psi)
    n, p, m = psi.shape
    x = psi.reshape(n, p * m)
    dy = np.diff(np.asarray(y, dtype=float), axis=0)
    w = np.asarray(w, dtype=float)
    s = np.einsum("nl,na,nb->lab", w, x, x)
    c = np.einsum("nl,na,ni->lai", w, x, dy)
    return s, c, w.sum(axis=0)


def _block_solve(r, evals, evecs, lam):
    """Minimise ``0.5 v'Av - r'v + lam ||v||`` per column of ``r`` (m, cols)."""
    m = r.shape[0]
    out = np.zeros_like(r)
    norms = np.linalg.norm(r, axis=0)
    active = norms > lam
    if not np.any(active) or evals[-1] <= 0:
        return out
    # directions with (numerically) zero curvature carry no signal
    live = evals > 1e-13 * evals[-1]
    lam_ = np.where(live, evals, 1.0)
    v = evecs.T @ r[:, active]
    v[~live] = 0.0
    if lam == 0:
        out[:, active] = evecs @ (v / lam_[:, None])
        return out
    if m == 1:
        vn = np.abs(v[0])
        out[:, active] = evecs @ (v * ((vn - lam) / (lam_[0] * vn)))
        return out
    vn = np.linalg.norm(v, axis=0)
    # ||v / (s*Lambda + lam)|| = 1 has a unique root s = ||phi|| in [lo, hi]
    lo = np.maximum(vn - lam, 0.0) / lam_[live].max()
    hi = np.maximum(vn - lam, 0.0) / lam_[live].min()
    s = lo.copy()
    v2 = v**2
    for _ in range(100):
        d = s * lam_[:, None] + lam
        f2 = (v2 / d**2).sum(axis=0)
        g = 1.0 / np.sqrt(f2) - 1.0
        lo = np.where(g < 0, s, lo)
        hi = np.where(g > 0, s, hi)
        df2 = -2.0 * (v2 * lam_[:, None] / d**3).sum(axis=0)
        dg = -0.5 * f2**-1.5 * df2
        step = np.where(dg > 0, s - g / np.where(dg > 0, dg, 1.0), -1.0)
        s_new = np.where((step > lo) & (step < hi), step, 0.5 * (lo + hi))
        if np.all(np.abs(s_new - s) <= 1e-15 * np.maximum(s, 1e-300)) or np.all(np.abs(g) < 1e-15):
            s = s_new
            break
        s = s_new
    phi = v * (s / (s * lam_[:, None] + lam))
    out[:, active] = evecs @ phi
    return out


def kkt_residual(a, b, phi, lam, m):
    """Scaled KKT violation of ``0.5 phi'A phi - b'phi + lam sum ||phi_j||``.

    Zero blocks contribute ``max(||grad_j|| - lam, 0)``, active blocks the
    norm of ``grad_j + lam phi_j / ||phi_j||``. Normalised by
    ``max(1, lam, max|b|)``.
    """
    d, cols = b.shape
    grad = (a @ phi - b).reshape(d // m, m, cols)
    blocks = phi.reshape(d // m, m, cols)
    norms = np.linalg.norm(blocks, axis=1)
    gn = np.linalg.norm(grad, axis=1)
    unit = blocks / np.where(norms > 0, norms, 1.0)[:, None, :]
    act = np.linalg.norm(grad + lam * unit, axis=1)
    res = np.where(norms > 0, act, np.maximum(gn - lam, 0.0))
    scale = max(1.0, lam, float(np.abs(b).max()) if b.size else 0.0)
    return float(res.max() / scale) if res.size else 0.0


def _sweep(a, b, lam, m, phi, ap, eig, blocks):
    """One pass of exact block updates over ``blocks``; returns the largest change."""
    biggest = 0.0
    for j in blocks:
        sl = slice(j * m, (j + 1) * m)
        old = phi[sl]
        if m == 1:
            ajj = a[j, j]
            r = b[j] - ap[j] + ajj * old[0]
            if ajj > 0:
                new = (np.sign(r) * np.maximum(np.abs(r) - lam, 0.0) / ajj)[None]
            else:
                new = np.zeros_like(old)
        else:
            r = b[sl] - ap[sl] + a[sl, sl] @ old
            new = _block_solve(r, eig[j][0], eig[j][1], lam)
        delta = new - old
        change = float(np.abs(delta).max())
        if change > 0:
            ap += a[:, j:j + 1] * delta if m == 1 else a[:, sl] @ delta
            phi[sl] = new
            biggest = max(biggest, change)
    return biggest


def _group_objective(a, b, lam, x, m):
    return float(0.5 * x @ a @ x - b @ x + lam * np.linalg.norm(x.reshape(-1, m), axis=1).sum())


def _polish_active(a, b, lam, m, phi, max_newton=50):
    """Newton solve of each column's problem restricted to its active blocks.

    On the active blocks the objective is smooth, so damped Newton steps
    converge quickly where coordinate sweeps crawl along correlated
    directions. A column is replaced only when no active block collapses
    and every inactive block satisfies ``||grad_j|| <= lam``.
    """
    d, cols = b.shape
    nb = d // m
    changed = False
    for col in range(cols):
        blk = np.flatnonzero(np.abs(phi[:, col]).reshape(nb, m).max(axis=1) > 0)
        if blk.size == 0:
            continue
        idx = (blk[:, None] * m + np.arange(m)).ravel()
        a_s, b_s = a[np.ix_(idx, idx)], b[idx, col]
        x = phi[idx, col].copy()
        f = _group_objective(a_s, b_s, lam, x, m)
        ok = False
        for _ in range(max_newton):
            xb = x.reshape(-1, m)
            nrm = np.linalg.norm(xb, axis=1)
            if np.any(nrm <= 1e-14 * max(1.0, nrm.max())):
                break
            u = xb / nrm[:, None]
            g = a_s @ x - b_s + lam * u.ravel()
            hess = a_s.copy()
            for t in range(blk.size):
                sl = slice(t * m, (t + 1) * m)
                hess[sl, sl] += lam * (np.eye(m) - np.outer(u[t], u[t])) / nrm[t]
            try:
                step = np.linalg.solve(hess, -g)
            except np.linalg.LinAlgError:
                break
            decrement = -float(g @ step)
            if decrement <= 1e-24 * max(1.0, abs(f)) or np.linalg.norm(g) == 0:
                ok = True
                break
            # a block pointing back through the origin means the support is wrong
            if np.any(np.einsum("ta,ta->t", xb, xb + step.reshape(-1, m)) <= 0):
                break
            t_len, trial = 1.0, None
            for _ in range(30):
                cand = x + t_len * step
                f_new = _group_objective(a_s, b_s, lam, cand, m)
                if f_new <= f:
                    trial = cand
                    break
                t_len *= 0.5
            if trial is None:
                ok = decrement <= 1e-16 * max(1.0, abs(f))
                break
            x, f = trial, f_new
        if not ok:
            continue
        trial = np.zeros(d)
        trial[idx] = x
        grad = (a @ trial - b[:, col]).reshape(nb, m)
        inactive = np.ones(nb, dtype=bool)
        inactive[blk] = False
        if np.all(np.linalg.norm(grad[inactive], axis=1) <= lam * (1 + 1e-12)):
            phi[:, col] = trial
            changed = True
    return changed


def group_lasso_bcd(a, b, lam, m, phi0=None, tol=INNER_TOL, max_sweeps=MAX_SWEEPS):
    """Block coordinate descent for ``min 0.5 phi'A phi - b'phi + lam sum_j ||phi_j||``.

    ``a`` is (d, d) with blocks of size ``m``; each column of ``b`` (d, cols)
    is an independent problem sharing ``a``. Full sweeps alternate with
    sweeps restricted to the currently active blocks. Stops once the scaled
    KKT residual is at most ``tol``. Returns ``(phi, sweeps, kkt)``.
    """
    d, cols = b.shape
    nb = d // m
    phi = np.zeros((d, cols)) if phi0 is None else np.array(phi0, dtype=float)
    if lam == 0 and cols:
        # unpenalised: solve the normal equations directly
        phi = np.linalg.lstsq(a, b, rcond=None)[0]
        return phi, 0, kkt_residual(a, b, phi, lam, m)
    eig = None if m == 1 else [
        np.linalg.eigh(a[j * m:(j + 1) * m, j * m:(j + 1) * m]) for j in range(nb)
    ]
    ap = a @ phi
    everything = range(nb)
    kkt = kkt_residual(a, b, phi, lam, m)
    sweeps = 0
    while kkt > tol and sweeps < max_sweeps:
        sweeps += 1
        biggest = _sweep(a, b, lam, m, phi, ap, eig, everything)
        scale = max(1.0, float(np.abs(phi).max()))
        active = np.flatnonzero(np.abs(phi).reshape(nb, m * cols).max(axis=1) > 0)
        inner = 0
        while sweeps < max_sweeps:
            sweeps += 1
            inner += 1
            if _sweep(a, b, lam, m, phi, ap, eig, active) <= 1e-3 * tol * scale:
                break
            # jump to the active-set solution once the support settles
            if inner % 10 == 0 and _polish_active(a, b, lam, m, phi):
                ap[:] = a @ phi
                if kkt_residual(a, b, phi, lam, m) <= tol:
                    break
        kkt = kkt_residual(a, b, phi, lam, m)
        if biggest <= 1e-15 * scale:
            break
    return phi, sweeps, kkt


def solve_theta(s, c, wsum, gram, sigma2, lam, theta_init, tol=INNER_TOL, max_sweeps=MAX_SWEEPS):
    """Group-lasso drift update from sufficient statistics.

    States whose total weight is below 1e-8 keep ``theta_init``. Returns
    ``(theta, info)`` where ``info`` holds the sweep counts and KKT residuals.
    """
    if lam < 0:
        raise DataError("lambda must be non-negative")
    theta_init = np.asarray(theta_init, dtype=float)
    k, p, _, m = theta_init.shape
    root, inv = _gram_roots(gram)
    rinv = np.zeros((p * m, p * m))
    rroot = np.zeros((p * m, p * m))
    for j in range(p):
        rinv[j * m:(j + 1) * m, j * m:(j + 1) * m] = inv[j]
        rroot[j * m:(j + 1) * m, j * m:(j + 1) * m] = root[j]
    theta = theta_init.copy()
    info = {"sweeps": np.zeros(k, dtype=int), "kkt": np.zeros(k), "frozen": np.zeros(k, dtype=bool)}
    for l in range(k):
        if wsum[l] < FROZEN_WEIGHT:
            info["frozen"][l] = True
            continue
        a = rinv @ s[l] @ rinv / (2.0 * sigma2)
        b = rinv @ c[l] / (2.0 * sigma2)
        # column i of phi0 is node i's coefficient vector in the whitened metric
        phi0 = rroot @ theta_init[l].reshape(p, p * m).T
        phi, sweeps, kkt = group_lasso_bcd(a, b, lam, m, phi0, tol, max_sweeps)
        theta[l] = (rinv @ phi).T.reshape(p, p, m)
        info["sweeps"][l] = sweeps
        info["kkt"][l] = kkt
    return theta, info


def m_step_theta(y, psi, w, sigma2, lam, theta_init, gram=None, tol=INNER_TOL, max_sweeps=MAX_SWEEPS):
    """Penalised weighted least-squares drift update; returns theta (k, p, p, m)."""
    if not sigma2 > 0:
        raise DataError("sigma2 must be positive")
    psi, _ = unpack_psi(psi)
    s, c, wsum = sufficient_stats(y, psi, w)
    if gram is None:
        gram = feature_gram(psi)
    theta, _ = solve_theta(s, c, wsum, gram, sigma2, lam, theta_init, tol, max_sweeps)
    return theta


def weighted_rss(y, psi, w, theta):
    """``sum_{n,l,i} w_l(t_n) r_{l,n,i}^2``."""
    from .posterior import residuals

    psi, _ = unpack_psi(psi)
    r = residuals(np.asarray(y, dtype=float), psi, theta)
    return float(np.einsum("nl,lni->", np.asarray(w, dtype=float), r**2))


def m_step_sigma(y, psi, w, theta, floor=SIGMA2_FLOOR):
    """Weighted residual variance ``rss / (2 p N)``, floored."""
    psi, _ = unpack_psi(psi)
    n, p, _ = psi.shape
    return max(weighted_rss(y, psi, w, theta) / (2.0 * p * n), floor)
