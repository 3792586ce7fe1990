import numpy as np
import pytest

from switchode import ctmc
from switchode.emfit import ModelParams, fit_grouped
from switchode.errors import DataError, EvaluationError
from switchode.evaluation import (
    RocPoint,
    RocResult,
    auc_from_points,
    auc_table,
    average_roc,
    dwell_times,
    match_states,
    mean_sd,
    param_distance,
    rates,
    roc_auc,
    sojourn_times,
)
from switchode.denoise import PsiFeatures


def truth_params(seed=0, k=2, p=4):
    rng = np.random.default_rng(seed)
    theta = rng.standard_normal((k, p, p, 1)) * (rng.random((k, p, p, 1)) < 0.4)
    q = ctmc.generator_from_rates(rng.uniform(0.1, 1.0, (k, k)))
    return ModelParams(q, theta, 0.01)


class Entry:
    def __init__(self, params, lam):
        self.params, self.lam = params, lam


def test_identity_and_swap_matching():
    t = truth_params()
    m = match_states(t, t)
    assert m.xi1 == m.xi2 == (0, 1) and m.consistent
    swapped = t.permuted((1, 0))
    m = match_states(swapped, t)
    assert m.xi1 == m.xi2 == (1, 0)
    assert param_distance(swapped, t, m.xi1) == (0.0, 0.0, 0.0, 0.0)


def test_inconsistent_matching_is_flagged():
    t = ModelParams(np.array([[-1.0, 1.0], [3.0, -3.0]]), np.zeros((2, 2, 2, 1)), 0.1)
    t.theta[0, 0, 0, 0] = 1.0
    # theta agrees with the identity, the generator with the swap
    est = ModelParams(np.array([[-3.0, 3.0], [1.0, -1.0]]), t.theta.copy(), 0.1)
    m = match_states(est, t)
    assert m.xi1 == (0, 1) and m.xi2 == (1, 0) and not m.consistent
    with pytest.raises(EvaluationError):
        roc_auc([Entry(est, 0.1)], t)


def test_matching_size_limits():
    with pytest.raises(DataError):
        match_states(truth_params(k=2), truth_params(k=3))


def test_param_distance_components():
    t = truth_params(1)
    est = t.copy()
    v = np.array([0.3])
    est.theta[1, 2, 0] += v
    d = param_distance(est, t)
    assert d[0] == pytest.approx(0.3)
    rng = np.random.default_rng(2)
    a, b, c = (ModelParams(t.q, rng.standard_normal(t.theta.shape), rng.random()) for _ in range(3))
    ab, ba = param_distance(a, b)[3], param_distance(b, a)[3]
    assert ab == pytest.approx(ba, abs=1e-10)
    assert param_distance(a, c)[3] <= ab + param_distance(b, c)[3] + 1e-10


def test_rates_definitions():
    true = np.zeros((1, 3, 3), dtype=bool)
    true[0, 0, 1] = true[0, 1, 2] = True
    pred = true.copy()
    pred[0, 2, 2] = True
    tpr, fpr = rates(pred, true)
    assert tpr[0] == 1.0 and fpr[0] == pytest.approx(1 / 7)


def test_auc_conventions():
    assert auc_from_points([0.0], [1.0]) == pytest.approx(1.0)
    # full graph then empty graph only: the diagonal
    assert auc_from_points([1.0, 0.0], [1.0, 0.0]) == pytest.approx(0.5)
    pts = ([0.1, 0.3], [0.6, 0.9])
    dup = ([0.1, 0.1, 0.3], [0.6, 0.6, 0.9])
    assert auc_from_points(*pts) == pytest.approx(auc_from_points(*dup))


def test_roc_with_true_edges_is_perfect():
    t = truth_params(3)
    res = roc_auc([Entry(t, lam) for lam in (0.1, 0.01)], t)
    for pt in res.points:
        assert np.all(pt.tpr == 1.0) and np.all(pt.fpr == 0.0)
    assert np.allclose(res.auc, 1.0)


def test_mean_sd_format_and_table():
    assert mean_sd([0.95, 0.97]) == "0.96(0.014)"
    rows = auc_table({200: [np.array([0.9, 1.0]), np.array([1.0, 1.0])]})
    assert rows == [[200, "0.95(0.071)", "1.00(0.000)"]]


def test_average_roc_vertical():
    pts = [RocPoint(0.1, np.array([0.5]), np.array([0.0]))]
    a = RocResult(pts, np.array([0.75]), 0)
    grid, tpr = average_roc([a, a], 0, [0.0, 0.5, 1.0])
    assert np.allclose(tpr, [0.5, 0.75, 1.0])


def grouped_data(rate, seed, n=120, p=2, h=0.25):
    rng = np.random.default_rng(seed)
    theta = np.zeros((2, p, p, 1))
    theta[0, 0, 1, 0] = 2.0
    theta[1, 1, 0, 0] = -2.0
    q = np.array([[-rate, rate], [rate, -rate]])
    states = ctmc.sample_path(q, n * h, 0, seed=rng).state_at(np.arange(n + 1) * h)
    psi = rng.standard_normal((n, p, 1)) * h
    dy = np.einsum("nij,nj->ni", theta[states[1:], :, :, 0], psi[:, :, 0])
    y = np.vstack([np.zeros(p), np.cumsum(dy + 0.02 * rng.standard_normal((n, p)), axis=0)])
    return y, psi


def test_dwell_times_partition_and_single_state():
    h = 0.25
    members = [(y, PsiFeatures(psi, h), "slow") for y, psi in (grouped_data(0.2, s) for s in range(2))]
    res = fit_grouped(members, k=2, lam=1e-3, seed=0)
    dwell = dwell_times(members, res)
    assert dwell["slow"].sum() == pytest.approx(120 * h)
    one = fit_grouped(members[:1], k=1, lam=1e-3, seed=0)
    assert dwell_times(members[:1], one)["slow"] == pytest.approx([120 * h])


def test_faster_group_has_shorter_sojourns():
    h = 0.25
    wins = 0
    for seed in range(10):
        members = []
        for g, rate in (("slow", 0.1), ("fast", 0.4)):
            for s in range(2):
                y, psi = grouped_data(rate, 100 * seed + 10 * s + (g == "fast"), n=200)
                members.append((y, PsiFeatures(psi, h), g))
        res = fit_grouped(members, k=2, lam=1e-3, seed=seed)
        soj = sojourn_times(members, res)
        wins += bool(np.all(soj["fast"] < soj["slow"]))
    assert wins == 10
