import numpy as np
import pytest
from scipy.integrate import quad
from scipy.linalg import expm

from switchode import ctmc
from switchode.errors import DataError, NullEventError, ReducibleChainError


def random_generator(rng, k, high=3.0):
    rates = rng.uniform(0.05, high, size=(k, k))
    return ctmc.generator_from_rates(rates)


def test_stationary_two_state_closed_form():
    q = np.array([[-0.27, 0.27], [0.18, -0.18]])
    pi = ctmc.stationary_distribution(q)
    assert np.allclose(pi, [0.4, 0.6], atol=1e-12)
    assert np.allclose(pi @ q, 0.0, atol=1e-14)


def test_reducible_and_malformed_generators_rejected():
    with pytest.raises(ReducibleChainError):
        ctmc.stationary_distribution(np.array([[0.0, 0.0], [1.0, -1.0]]))
    with pytest.raises(ReducibleChainError):
        ctmc.as_rate_matrix(np.array([[-1.0, 0.5], [1.0, -1.0]]))
    with pytest.raises(DataError):
        ctmc.as_rate_matrix(np.zeros((2, 3)))


def test_transition_matrix_two_state_closed_form():
    a, b, h = 0.27, 0.18, 0.7
    q = np.array([[-a, a], [b, -b]])
    e = np.exp(-(a + b) * h)
    expected = np.array([[b + a * e, a - a * e], [b - b * e, a + b * e]]) / (a + b)
    assert np.allclose(ctmc.transition_matrix(q, h), expected, atol=1e-14)


def test_van_loan_matches_quadrature():
    rng = np.random.default_rng(1)
    q = random_generator(rng, 3)
    h = 0.8
    got = ctmc.van_loan_integral(q, h, 0, 2)
    for i in range(3):
        for j in range(3):
            f = lambda u: expm(q * u)[i, 0] * expm(q * (h - u))[2, j]
            ref, _ = quad(f, 0, h, epsabs=1e-13, epsrel=1e-13)
            assert abs(got[i, j] - ref) < 1e-11


def test_dwell_partitions_interval():
    rng = np.random.default_rng(2)
    for k in (2, 3, 4):
        q = random_generator(rng, k)
        for i in range(k):
            for j in range(k):
                total = sum(ctmc.expected_dwell(q, 0.5, i, j, l) for l in range(k))
                assert abs(total - 0.5) < 1e-10


def test_one_state_chain_dwell_is_h():
    assert ctmc.expected_dwell(np.zeros((1, 1)), 0.3, 0, 0, 0) == pytest.approx(0.3)


def test_short_interval_transition_limit():
    # with no jumps possible in the limit, E[N_ij | i -> j] -> 1 for i != j
    q = np.array([[-1.0, 1.0], [2.0, -2.0]])
    assert ctmc.expected_transitions(q, 1e-6, 0, 1, 0, 1) == pytest.approx(1.0, abs=1e-5)


def test_null_event_raises():
    # over a zero-length interval P = I, so ending in another state is null
    q = np.array([[-1.0, 1.0], [1.0, -1.0]])
    with pytest.raises(NullEventError):
        ctmc._endpoint_prob(q, 0.0, 0, 1)


def test_reversibility_of_two_state_chain():
    assert ctmc.check_reversibility(np.array([[-0.27, 0.27], [0.18, -0.18]]))
    q3 = ctmc.generator_from_rates([[0, 1, 0.01], [0.01, 0, 1], [1, 0.01, 0]])
    assert not ctmc.check_reversibility(q3)


def test_sample_path_reproducible_and_occupation():
    q = np.array([[-0.27, 0.27], [0.18, -0.18]])
    a = ctmc.sample_path(q, 40.0, "stationary", seed=3)
    b = ctmc.sample_path(q, 40.0, "stationary", seed=3)
    assert a == b
    assert a.occupation(2).sum() == pytest.approx(40.0)
    assert ctmc.PathSample.from_dict(a.to_dict()) == a


def test_sample_path_long_run_occupation_matches_stationary():
    q = np.array([[-0.27, 0.27], [0.18, -0.18]])
    path = ctmc.sample_path(q, 2e4, 0, seed=4)
    frac = path.occupation(2) / 2e4
    assert np.allclose(frac, [0.4, 0.6], atol=0.02)


def test_transition_counts_match_jumps():
    q = np.array([[-1.0, 1.0], [1.5, -1.5]])
    path = ctmc.sample_path(q, 50.0, 0, seed=5)
    counts = path.transition_counts(2)
    assert counts.sum() == len(path.jump_times)
    assert np.all(np.diag(counts) == 0)
