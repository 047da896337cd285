import numpy as np
import pytest
import scipy.sparse as sp

from dmpc.admm import kkt_residual
from dmpc.centralized import centralized_nlp_solve, centralized_qp_solve
from dmpc.dsqp import DsqpConfig, RtiState, dsqp_solve, linearize, rti_control_step
from dmpc.problem import PartialNLP, QuadraticSubsystem, SmoothSubsystem, build_coupling
from dmpc.qp import QPData

from conftest import make_ocp
from test_admm import random_two_subsystem


def circle_problem():
    # min (z-2)^2/2  s.t.  z^2 = 1
    sub = SmoothSubsystem(
        1, f=lambda z: 0.5 * (z[0] - 2) ** 2, grad=lambda z: z - 2, hess=lambda z: np.eye(1),
        eq=lambda z: np.array([z[0] ** 2 - 1]), eq_jac=lambda z: np.array([[2 * z[0]]]),
        eq_hess=lambda z, nu: np.array([[2 * nu[0]]]))
    return PartialNLP([sub], build_coupling([], [1]))


def newton_on_kkt(z, nu, iters=30):
    for _ in range(iters):
        F = np.array([(z - 2) + 2 * z * nu, z * z - 1])
        J = np.array([[1 + 2 * nu, 2 * z], [2 * z, 0.0]])
        z, nu = np.array([z, nu]) - np.linalg.solve(J, F)
    return z, nu


def test_hand_linearization():
    sub = circle_problem().subsystems[0]
    qp = linearize(sub, np.array([2.0]))
    assert qp.Aeq.toarray()[0, 0] == 4.0 and qp.beq[0] == -3.0
    assert qp.beq[0] / qp.Aeq.toarray()[0, 0] == -0.75
    assert qp.q[0] == 0.0


@pytest.mark.parametrize("hessian", ["gauss-newton", "exact"])
def test_scalar_nlp_against_newton_oracle(hessian):
    z_star, nu_star = newton_on_kkt(0.5, 0.0)
    assert abs(z_star - 1.0) < 1e-14
    nlp = circle_problem()
    init = RtiState(z=[np.array([0.5])], gamma=[np.zeros(1)])
    out, stats = dsqp_solve(nlp, init, DsqpConfig(k_max=6, l_max=300, rho=1.0, kkt_tol=1e-8, qp_tol=1e-12,
                                                  hessian=hessian))
    assert stats.converged and stats.outer_iterations <= 6
    assert abs(out.z[0][0] - z_star) < 1e-8
    assert abs(out.nu[0][0] - nu_star) < 1e-6


def test_gauss_newton_hessian_constant_on_benchmark(rng):
    ocp, state = make_ocp(horizon=5, mode="nonlinear")
    sub = ocp.problem(state).subsystems[0]
    H0 = linearize(sub, np.zeros(sub.dim)).H
    H1 = linearize(sub, rng.normal(size=sub.dim)).H
    assert (H0 != H1).nnz == 0


def test_quadratic_problem_is_exact_in_one_outer_iteration(rng):
    qps, c = random_two_subsystem(rng)
    nlp = PartialNLP([QuadraticSubsystem.from_qp(q) for q in qps], c)
    ref = centralized_qp_solve(nlp)
    out, stats = dsqp_solve(nlp, RtiState.zeros(nlp), DsqpConfig(k_max=1, l_max=10_000, inner_kkt_tol=1e-9,
                                                                 qp_tol=1e-10))
    assert np.abs(nlp.stack(out.z) - ref.z_flat).max() <= 1e-4


def test_benchmark_nonlinear_against_oracle():
    ocp, state = make_ocp(horizon=10, mode="nonlinear", zero_loads=False)
    state.omega[:] = 0.2
    nlp = ocp.problem(state)
    ref = centralized_nlp_solve(nlp)
    out, stats = dsqp_solve(nlp, RtiState.zeros(nlp), DsqpConfig(k_max=10, l_max=100, rho=1.0, kkt_tol=1e-4,
                                                                 inner_kkt_tol=1e-4))
    assert stats.converged
    assert np.abs(nlp.stack(out.z) - ref.z_flat).max() <= 1e-2


def test_rti_equilibrium_stays_at_origin():
    ocp, state = make_ocp(horizon=6, mode="nonlinear")
    state.omega[:] = 0.0
    nlp = ocp.problem(state)
    u, new, info = rti_control_step(nlp, RtiState.zeros(nlp), DsqpConfig(k_max=1, l_max=5))
    assert np.abs(u).max() < 1e-9
    assert max(np.abs(z).max() for z in new.z) < 1e-9
    assert info["inner_iterations"] == 5 and new.step_index == 1


def test_rti_budget_box_and_zero_iterations():
    ocp, state = make_ocp(horizon=6, mode="nonlinear", zero_loads=False)
    state.omega[:] = 3.0
    nlp = ocp.problem(state)
    cfg = DsqpConfig(k_max=2, l_max=3, kkt_tol=1e-12, inner_kkt_tol=1e-12)
    u, new, info = rti_control_step(nlp, RtiState.zeros(nlp), cfg)
    assert info["inner_iterations"] == 6
    assert np.all(np.abs(u) <= 0.3)
    u0, same, _ = rti_control_step(nlp, new, DsqpConfig(k_max=1, l_max=0))
    assert np.array_equal(u0, nlp.first_inputs(new.z))
    assert all(np.array_equal(a, b) for a, b in zip(same.z, new.z))


def test_rti_failure_holds_previous_input():
    sub = QuadraticSubsystem(np.eye(2), np.zeros(2), Aineq=sp.csr_matrix([[1.0, 0], [-1.0, 0]]),
                             bineq=np.array([-1.0, -1.0]))
    nlp = PartialNLP([sub], build_coupling([], [2]), input_index=[[0]], input_box=(-0.3, 0.3))
    st = RtiState(z=[np.zeros(2)], gamma=[np.zeros(2)], u_prev=np.array([0.2]))
    u, new, info = rti_control_step(nlp, st, DsqpConfig(k_max=1, l_max=2, qp_max_iter=3000))
    assert info["degraded"] and np.array_equal(u, [0.2])


@pytest.fixture(scope="module")
def steady_rollout():
    from dmpc.grid import ScenarioConfig
    from dmpc.harness import run_closed_loop
    cfg = ScenarioConfig(case=1, grid_side=2, horizon=20, t_final_s=10.0, freq_bound_mHz=0.2)
    res = run_closed_loop(cfg, "dsqp", k_max=1, l_max=10, j_star=False, record_kkt=True)
    om = np.abs(res.omega).max(axis=1)
    above = np.flatnonzero(om > 1e-4)
    start = int(above[-1]) + 1 if above.size else 0
    assert om.size - start >= 20
    return np.array(res.kkt)[start:]


def test_warm_started_residual_contracts_over_windows(steady_rollout):
    r = steady_rollout
    w = 5
    peaks = np.array([r[k:k + w].max() for k in range(0, r.size - w + 1, w)])
    assert np.all(peaks[1:] <= 1.5 * peaks[:-1])


@pytest.mark.xfail(strict=False, reason="single-step residual ratios fluctuate up to about 1.7 "
                                         "with a fixed ADMM budget; only windowed peaks contract")
def test_warm_started_residual_contracts_every_step(steady_rollout):
    r = steady_rollout
    assert np.all(r[1:] <= 1.5 * r[:-1])
