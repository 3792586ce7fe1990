import numpy as np
import pytest

from switchode import ctmc
from switchode import simulate as sim
from switchode.errors import DataError, DivergenceError


def fixed_path(state, T):
    return ctmc.PathSample((), (state,), T)


def test_linear_single_state_matches_matrix_exponential():
    from scipy.linalg import expm

    a = np.array([[0.0, 1.0], [-1.0, 0.0]])
    theta = a[None, :, :, None]
    model = sim.AdditiveODEModel(theta, sim.BasisFamily(1))
    x0 = np.array([1.0, 0.0])
    traj = sim.integrate(model, np.zeros((1, 1)), x0, 2.0, path=fixed_path(0, 2.0))
    assert np.allclose(traj.x[-1], expm(2.0 * a) @ x0, atol=1e-10)


def test_switch_inside_step_is_resolved():
    # dx/dt = +1 in state 0 and -1 in state 1 via a constant-like node
    theta = np.zeros((2, 2, 2, 1))
    theta[0, 0, 1, 0] = 1.0
    theta[1, 0, 1, 0] = -1.0
    model = sim.AdditiveODEModel(theta, sim.BasisFamily(1))
    path = ctmc.PathSample((0.3,), (0, 1), 1.0)
    traj = sim.integrate(model, np.array([[-1.0, 1.0], [1.0, -1.0]]), np.array([0.0, 1.0]), 1.0,
                         dt_fine=0.25, path=path)
    # node 1 is constant 1, so x0(1) = 0.3 - 0.7
    assert traj.x[-1, 0] == pytest.approx(-0.4, abs=1e-12)


def test_divergence_detected():
    theta = np.full((1, 1, 1, 2), 0.0)
    theta[0, 0, 0, 1] = 1.0  # dx/dt = x^2 blows up at t = 1/x0
    model = sim.AdditiveODEModel(theta, sim.BasisFamily(2))
    with pytest.raises(DivergenceError):
        sim.integrate(model, np.zeros((1, 1)), np.array([1.0]), 2.0, path=fixed_path(0, 2.0))


def test_observe_zero_noise_equals_samples():
    model, q, x0 = sim.dgp1()
    traj = sim.integrate(model, q, x0, 10.0, seed=0)
    obs = sim.observe(traj, 50, 0.0, seed=1)
    assert np.array_equal(obs.y, sim.sample_trajectory(traj, obs.times))
    assert obs.h == pytest.approx(0.2)


def test_simulation_reproducible():
    model, q, x0 = sim.dgp2()
    a = sim.observe(sim.integrate(model, q, x0, 10.0, seed=3), 40, 0.01, seed=4)
    b = sim.observe(sim.integrate(model, q, x0, 10.0, seed=3), 40, 0.01, seed=4)
    assert np.array_equal(a.y, b.y)


def test_benchmark_structures():
    m1, q1, _ = sim.dgp1()
    assert m1.theta.shape == (2, 10, 10, 3)
    edges = np.linalg.norm(m1.theta, axis=-1) > 0
    # state 1 uses nodes 0..5, state 2 nodes 4..9
    assert not edges[0][6:, :].any() and not edges[1][:4, :].any()
    m2, q2, x0 = sim.dgp2()
    e2 = np.linalg.norm(m2.theta, axis=-1) > 0
    assert e2[0].sum() == 32 and e2[1].sum() == 40
    assert np.allclose(q1, [[-0.27, 0.27], [0.18, -0.18]])
    # both DGP2 states are skew-symmetric, so energy is conserved
    for l in range(2):
        a = m2.theta[l, :, :, 0]
        assert np.allclose(a, -a.T)
    assert x0.shape == (20,)


def test_bad_inputs():
    with pytest.raises(DataError):
        sim.BasisFamily(0)
    model, q, x0 = sim.dgp1()
    with pytest.raises(DataError):
        sim.integrate(model, q, x0[:3], 1.0)
    with pytest.raises(DataError):
        sim.observe(sim.integrate(model, q, x0, 1.0, seed=0), 1, 0.1)
