"""State matching, parameter distances, ROC/AUC over lambda paths, dwell summaries."""
import itertools
from dataclasses import dataclass

import numpy as np

from .emfit.fit import as_member, support
from .emfit.posterior import e_step_statistics, forward_backward
from .errors import DataError, EvaluationError

MAX_EXHAUSTIVE_STATES = 8


@dataclass(frozen=True)
class StateMatch:
    """``xi[l]`` is the estimated state matched to true state ``l``."""

    xi1: tuple
    xi2: tuple

    @property
    def consistent(self):
        return self.xi1 == self.xi2


@dataclass
class RocPoint:
    lam: float
    tpr: np.ndarray
    fpr: np.ndarray


@dataclass
class RocResult:
    points: list
    auc: np.ndarray
    dropped: int


def _params(obj):
    return obj.params if hasattr(obj, "params") else obj


def match_states(est, truth):
    """Exhaustive permutation matching on drift tensors and on generators.

    Ties go to the lexicographically first permutation.
    """
    est, truth = _params(est), _params(truth)
    k = truth.k
    if est.k != k:
        raise DataError(f"estimate has {est.k} states, truth has {k}")
    if k > MAX_EXHAUSTIVE_STATES:
        raise DataError(f"exhaustive matching supports k <= {MAX_EXHAUSTIVE_STATES}, got {k}")
    best1 = best2 = None
    c1 = c2 = np.inf
    for perm in itertools.permutations(range(k)):
        idx = list(perm)
        d1 = sum(np.linalg.norm(est.theta[idx[l]] - truth.theta[l]) for l in range(k))
        d2 = np.abs(est.q[np.ix_(idx, idx)] - truth.q).sum()
        if d1 < c1:
            c1, best1 = d1, perm
        if d2 < c2:
            c2, best2 = d2, perm
    return StateMatch(tuple(best1), tuple(best2))


def param_distance(est, truth, xi=None):
    """``(d_theta, d_q, d_sigma, total)`` after relabelling ``est`` by ``xi``.

    ``d_theta`` sums Euclidean norms of the drift rows ``theta[l, i, :, :]``,
    ``d_q`` sums absolute off-diagonal rate differences.
    """
    est, truth = _params(est), _params(truth)
    if est.theta.shape != truth.theta.shape:
        raise DataError("parameter shapes differ")
    if xi is not None:
        est = est.permuted(xi)
    k, p = truth.k, truth.p
    diff = (est.theta - truth.theta).reshape(k, p, -1)
    d_theta = float(np.linalg.norm(diff, axis=2).sum())
    off = ~np.eye(k, dtype=bool)
    d_q = float(np.abs(est.q - truth.q)[off].sum())
    d_sigma = abs(est.sigma2 - truth.sigma2)
    return d_theta, d_q, d_sigma, d_theta + d_q + d_sigma


def rates(pred, true):
    """Per-state TPR and FPR of predicted masks (k, p, p) against true masks.

    FPR uses ``p**2 - |E|`` negatives. A state without true edges has TPR 1.
    """
    pred = np.asarray(pred, dtype=bool)
    true = np.asarray(true, dtype=bool)
    pos = true.sum(axis=(1, 2))
    neg = true[0].size - pos
    tp = (pred & true).sum(axis=(1, 2))
    fp = (pred & ~true).sum(axis=(1, 2))
    tpr = np.where(pos > 0, tp / np.maximum(pos, 1), 1.0)
    fpr = np.where(neg > 0, fp / np.maximum(neg, 1), 0.0)
    return tpr, fpr


def auc_from_points(fpr, tpr):
    """Trapezoid area under ROC points closed by (0, 0) and (1, 1)."""
    fpr = np.concatenate([[0.0], np.asarray(fpr, dtype=float), [1.0]])
    tpr = np.concatenate([[0.0], np.asarray(tpr, dtype=float), [1.0]])
    order = np.lexsort((tpr, fpr))
    return float(np.trapezoid(tpr[order], fpr[order]))


def roc_auc(path_results, truth, epsilon_t=1e-6):
    """ROC points along a lambda path and per-state AUC.

    Entries whose two state matchings disagree are dropped. ``epsilon_t``
    is a scalar or one value per path entry.
    """
    truth = _params(truth)
    eps = np.broadcast_to(np.asarray(epsilon_t, dtype=float), (len(path_results),))
    true_mask = support(truth.theta, 0.0)
    points = []
    dropped = 0
    for res, e in zip(path_results, eps):
        est = _params(res)
        match = match_states(est, truth)
        if not match.consistent:
            dropped += 1
            continue
        pred = support(est.permuted(match.xi1).theta, e)
        tpr, fpr = rates(pred, true_mask)
        points.append(RocPoint(float(getattr(res, "lam", np.nan)), tpr, fpr))
    if not points:
        raise EvaluationError(f"no eligible ROC points ({dropped} dropped as inconsistent)")
    k = truth.k
    auc = np.array([
        auc_from_points([pt.fpr[l] for pt in points], [pt.tpr[l] for pt in points]) for l in range(k)
    ])
    return RocResult(points, auc, dropped)


def mean_sd(values):
    """``"mean(sd)"`` summary string, e.g. ``0.96(0.006)``."""
    values = np.asarray(values, dtype=float)
    sd = values.std(ddof=1) if values.size > 1 else 0.0
    return f"{values.mean():.2f}({sd:.3f})"


def _group_statistics(members, fitted):
    out = {}
    for y, psi, label in members:
        yy, pp, h = as_member(y, psi)
        params = fitted.params_for(label) if hasattr(fitted, "params_for") else fitted[label]
        post = forward_backward(yy, pp, params, h)
        m_hat, tau = e_step_statistics(post, params.q, h)
        out.setdefault(label, []).append((m_hat, tau))
    return out


def dwell_times(members, fitted):
    """Mean expected dwell time per state for each group.

    ``members`` is the ``(y, psi, label)`` list used for ``fit_grouped``
    (``psi`` as ``PsiFeatures`` so the sampling period travels with it);
    posteriors are recomputed under the fitted group parameters.
    """
    stats = _group_statistics(members, fitted)
    return {label: np.mean([tau for _, tau in v], axis=0) for label, v in stats.items()}


def sojourn_times(members, fitted):
    """Mean expected length of one visit to each state, per group.

    Expected dwell divided by the expected number of departures, pooled
    over the group's members. States never left get ``inf``.
    """
    stats = _group_statistics(members, fitted)
    out = {}
    for label, v in stats.items():
        tau = sum(t for _, t in v)
        exits = sum(m.sum(axis=1) - np.diag(m) for m, _ in v)
        out[label] = np.where(exits > 0, tau / np.where(exits > 0, exits, 1.0), np.inf)
    return out


def average_roc(results, state, fpr_grid=None):
    """Vertically averaged ROC curve for one state over several runs.

    Each run's points (closed by (0, 0) and (1, 1)) are linearly
    interpolated at ``fpr_grid`` (default 101 points on [0, 1]); returns
    ``(fpr_grid, mean_tpr)``.
    """
    fpr_grid = np.linspace(0.0, 1.0, 101) if fpr_grid is None else np.asarray(fpr_grid, dtype=float)
    if not results:
        raise EvaluationError("no ROC results to average")
    curves = []
    for res in results:
        fpr = np.concatenate([[0.0], [pt.fpr[state] for pt in res.points], [1.0]])
        tpr = np.concatenate([[0.0], [pt.tpr[state] for pt in res.points], [1.0]])
        order = np.lexsort((tpr, fpr))
        curves.append(np.interp(fpr_grid, fpr[order], tpr[order]))
    return fpr_grid, np.mean(curves, axis=0)


def auc_table(aucs_by_n):
    """Rows ``[N, "mean(sd)" per state]`` from ``{N: [auc array per run]}``."""
    rows = []
    for n in sorted(aucs_by_n):
        runs = np.asarray(aucs_by_n[n], dtype=float)
        rows.append([n, *(mean_sd(runs[:, l]) for l in range(runs.shape[1]))])
    return rows
