import numpy as np
import pytest

from dmpc.admm import AdmmConfig, SolverError, admm_solve, kkt_residual, qp_problem
from dmpc.centralized import centralized_qp_solve
from dmpc.dsqp import affine_qp
from dmpc.problem import IterateState, build_coupling, check_dual_condition
from dmpc.qp import QPData

from conftest import make_ocp


def scalar_pair():
    # (z1 - 1)^2 + (z2 + 1)^2 with z2 a copy of z1
    qps = [QPData([[2.0]], [-2.0]), QPData([[2.0]], [2.0])]
    return qps, build_coupling([((1, 0), (0, 0))], [1, 1])


def test_scalar_consensus_converges_to_zero():
    qps, c = scalar_pair()
    res, stats = admm_solve(qps, c, IterateState.zeros(c.dims), AdmmConfig(rho=1.0, l_max=300, qp_tol=1e-10))
    assert abs(res.z_bar[0][0]) < 1e-8 and res.z_bar[0][0] == res.z_bar[1][0]
    assert abs(res.gamma[0][0] - 2.0) < 1e-7 and abs(res.gamma[1][0] + 2.0) < 1e-7


def test_exact_solution_is_fixed_point():
    qps, c = scalar_pair()
    init = IterateState(z=[np.zeros(1)] * 2, z_bar=[np.zeros(1)] * 2, gamma=[np.array([2.0]), np.array([-2.0])],
                        nu=[np.zeros(0)] * 2, mu=[np.zeros(0)] * 2)
    res, stats = admm_solve(qps, c, init, AdmmConfig(rho=1.0, l_max=50, kkt_tol=1e-8, kkt_check_period=1,
                                                     qp_tol=1e-12))
    assert stats.iterations_run == 1 and stats.converged
    assert stats.final_kkt <= 1e-8


def test_rejects_bad_initialization():
    qps, c = scalar_pair()
    bad = IterateState.zeros(c.dims)
    bad.gamma = [np.array([1.0]), np.array([1.0])]
    with pytest.raises(ValueError):
        admm_solve(qps, c, bad, AdmmConfig())
    bad = IterateState.zeros(c.dims)
    bad.z_bar = [np.array([1.0]), np.array([0.0])]
    with pytest.raises(ValueError):
        admm_solve(qps, c, bad, AdmmConfig())


def random_two_subsystem(rng, n=6, shared=2):
    qps = []
    for _ in range(2):
        G = rng.normal(size=(n, n))
        Ain = rng.normal(size=(3, n))
        qps.append(QPData(G @ G.T / n + 0.2 * np.eye(n), rng.normal(size=n), Aineq=Ain,
                          bineq=rng.uniform(0.5, 1.5, 3)))
    pairs = [((1, k), (0, k)) for k in range(shared)]
    return qps, build_coupling(pairs, [n, n])


def test_matches_centralized_oracle(rng):
    qps, c = random_two_subsystem(rng)
    ref = centralized_qp_solve(qps, coupling=c)
    res, _ = admm_solve(qps, c, IterateState.zeros(c.dims),
                        AdmmConfig(rho=1.0, l_max=10_000, kkt_tol=1e-9, kkt_check_period=10, qp_tol=1e-10))
    assert np.abs(c.stack(res.z_bar) - ref.z_flat).max() <= 1e-4


def test_dual_condition_preserved_over_many_iterations(rng):
    qps, c = random_two_subsystem(rng)
    gam_hist = []
    state = IterateState.zeros(c.dims)
    cfg = AdmmConfig(rho=0.7, l_max=1)
    for _ in range(1000):
        state, _ = admm_solve(qps, c, state, cfg)
        gam = c.stack(state.gamma)
        gam_hist.append(np.abs(c.average(gam)).max())
        assert check_dual_condition(c, gam, tol=1e-10)
    zb = c.stack(state.z_bar)
    assert np.array_equal(zb[c.copy_index], zb[c.original_index])
    assert max(gam_hist) <= 1e-10


def residual_example():
    qps = [QPData([[2.0]], [-2.0], Aineq=[[1.0]], bineq=[0.5])]
    return qp_problem(qps, build_coupling([], [1]))


def test_residual_zero_at_kkt_point():
    nlp = residual_example()
    # z = 0.5 active, stationarity 2*0.5 - 2 + mu = 0 -> mu = 1
    st = IterateState(z=[np.array([0.5])], z_bar=[np.array([0.5])], gamma=[np.zeros(1)],
                      nu=[np.zeros(0)], mu=[np.array([1.0])])
    assert kkt_residual(nlp, st) <= 1e-12


def test_residual_reduces_to_gradient_norm():
    nlp = qp_problem([QPData(np.eye(2), [3.0, -1.0])], build_coupling([], [2]))
    st = IterateState(z=[np.array([0.5, 0.5])], z_bar=[np.zeros(2)], gamma=[np.zeros(2)],
                      nu=[np.zeros(0)], mu=[np.zeros(0)])
    assert kkt_residual(nlp, st) == pytest.approx(3.5)


def test_residual_lipschitz_under_perturbation(rng):
    nlp = residual_example()
    base = IterateState(z=[np.array([0.5])], z_bar=[np.array([0.5])], gamma=[np.zeros(1)],
                        nu=[np.zeros(0)], mu=[np.array([1.0])])
    # finite-difference Lipschitz estimate along random directions
    h = 1e-6
    L = 0.0
    for _ in range(20):
        d = rng.normal()
        st = base.copy()
        st.z[0] = st.z[0] + h * d
        L = max(L, kkt_residual(nlp, st) / (h * abs(d)))
    for _ in range(20):
        d = rng.uniform(-1, 1) * 1e-3
        st = base.copy()
        st.z[0] = st.z[0] + d
        assert kkt_residual(nlp, st) <= 1.01 * L * abs(d) + 1e-15


def test_benchmark_admm_matches_oracle():
    ocp, state = make_ocp(horizon=8)
    state.omega[:] = 0.1
    nlp = ocp.problem(state)
    ref = centralized_qp_solve(nlp)
    qps = [affine_qp(s) for s in nlp.subsystems]
    res, stats = admm_solve(qps, nlp.coupling, IterateState.zeros(nlp),
                            AdmmConfig(rho=1.0, l_max=10_000, kkt_tol=1e-7, kkt_check_period=10,
                                       qp_tol=1e-10))
    assert stats.converged
    assert np.abs(nlp.stack(res.z_bar) - ref.z_flat).max() <= 1e-4


def test_infeasible_subsystem_raises():
    qps = [QPData(np.eye(1), [0.0], Aineq=[[1.0], [-1.0]], bineq=[-1.0, -1.0]), QPData(np.eye(1), [0.0])]
    c = build_coupling([((1, 0), (0, 0))], [1, 1])
    with pytest.raises(SolverError) as err:
        admm_solve(qps, c, IterateState.zeros(c.dims), AdmmConfig(l_max=3, qp_max_iter=5000))
    assert err.value.subsystem == 0


def test_threaded_run_is_identical():
    ocp, state = make_ocp(horizon=6)
    state.omega[:] = 0.1
    nlp = ocp.problem(state)
    qps = [affine_qp(s) for s in nlp.subsystems]
    out = []
    for threads in (1, 3):
        res, st = admm_solve(qps, nlp.coupling, IterateState.zeros(nlp), AdmmConfig(l_max=15, threads=threads))
        out.append(nlp.stack(res.z_bar))
    assert np.array_equal(out[0], out[1])
