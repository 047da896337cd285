"""End-to-end acceptance checks, one test per criterion.

Each test records a ``CRITERION n: PASS|FAIL`` line; the lines are
printed in the terminal summary whether or not output is captured.
"""

import time

import numpy as np
import pytest

from dmpc.admm import AdmmConfig, admm_solve, make_local_solvers
from dmpc.centralized import OracleConfig, centralized_nlp_solve, centralized_qp_solve
from dmpc.dsqp import DsqpConfig, RtiState, affine_qp, dsqp_solve
from dmpc.grid import GridOCP, PlantState, ScenarioConfig, generate_network, plant_step
from dmpc.grid.dynamics import SubsystemDynamics
from dmpc.harness import compare, run_closed_loop, run_open_loop
from dmpc.problem import IterateState, check_dual_condition

from conftest import CRITERIA
from test_centralized import folded_residual
from test_grid import LAM, relative_fd_error, single_bus
from test_problem import pinv_projector

pytestmark = pytest.mark.acceptance

ORACLE_LOG = []


def report(n, ok, detail):
    CRITERIA[n] = f"CRITERION {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    assert ok, detail


def case_one(side, mode, horizon=25):
    model, state = generate_network(ScenarioConfig(case=1, grid_side=side))
    state.w = np.zeros_like(state.w)
    ocp = GridOCP(model, horizon, 0.1, mode)
    return ocp, ocp.problem(state)


def logged(res, nlp):
    ORACLE_LOG.append((nlp, res))
    return res


@pytest.fixture(scope="module")
def qp_oracles():
    out = {}
    for side in (1, 2, 3):
        ocp, nlp = case_one(side, "linear")
        out[side] = (nlp, logged(centralized_qp_solve(nlp, OracleConfig(kkt_tol=1e-8)), nlp))
    return out


def test_criterion_1_iteration_scalability():
    cfg = ScenarioConfig(case=1, horizon=25, dynamics="linear")
    its = {}
    for side in (2, 3, 4):
        res = run_open_loop(ScenarioConfig(**{**cfg.to_dict(), "grid_side": side}), "admm", repeats=1, tol=1e-3)
        assert res.status == "ok", res.error
        its[res.subsystems] = res.iterations
    base = its[4]
    ok = all(abs(v - base) <= 0.25 * base for v in its.values())
    report(1, ok, f"ADMM iterations to r<=1e-3 by subsystem count: {its}")


def test_criterion_2_admm_matches_centralized(qp_oracles):
    errs = {}
    for side, (nlp, ref) in qp_oracles.items():
        assert ref.r <= 1e-8
        qps = [affine_qp(s) for s in nlp.subsystems]
        cfg = AdmmConfig(rho=1.0, l_max=10_000, kkt_tol=1e-7, kkt_check_period=10, qp_tol=1e-10)
        st, _ = admm_solve(qps, nlp.coupling, IterateState.zeros(nlp.dims), cfg)
        errs[side ** 2] = float(np.abs(np.concatenate(st.z_bar) - ref.z_flat).max())
    report(2, max(errs.values()) <= 1e-3, f"max |z_bar - z*| by subsystem count: {errs}")


def test_criterion_3_dsqp_matches_centralized_nlp():
    ocp, nlp = case_one(2, "nonlinear")
    cfg = DsqpConfig(k_max=30, l_max=10_000, kkt_tol=1e-3, inner_kkt_tol=1e-4, kkt_check_period=5,
                     qp_tol=1e-8)
    out, stats = dsqp_solve(nlp, RtiState.zeros(nlp), cfg)
    ref = logged(centralized_nlp_solve(nlp, None, OracleConfig(kkt_tol=1e-8)), nlp)
    dz = float(np.abs(np.concatenate(out.z) - ref.z_flat).max())
    ok = stats.converged and stats.final_kkt <= 1e-3 and ref.r <= 1e-8 and dz <= 1e-2
    report(3, ok, f"dSQP r={stats.final_kkt:.2e} after {stats.outer_iterations} outer / "
                  f"{stats.total_inner} inner iterations, |dz|={dz:.2e}")


def test_criterion_4_closed_loop_suboptimality():
    cfg = ScenarioConfig(case="network_A", horizon=50, t_final_s=10.0)
    t0 = time.perf_counter()
    rows = compare(cfg, range(1, 11), k_max=1)
    ratios = [r["ratio"] for r in rows]
    reach = [r["l_max"] for r in rows if r["ratio"] >= 0.99]
    monotone = all(b >= a - 0.005 for a, b in zip(ratios, ratios[1:]))
    ok = bool(reach) and monotone
    report(4, ok, f"J*={rows[0]['J_star']:.6g}, J*/J for l_max=1..10: "
                  f"{[round(r, 4) for r in ratios]}, first >=0.99 at l_max={reach[:1]}, "
                  f"{time.perf_counter() - t0:.0f} s")


def test_criterion_5_network_b_synchronization():
    cfg = ScenarioConfig(case="network_B")
    res = run_closed_loop(cfg, "dsqp", k_max=1, l_max=10, j_star=False)
    final = float(np.abs(res.omega[-1]).max())
    pmax = float(np.abs(res.p).max())
    ok = final <= 1e-2 and pmax <= 0.3 and not any(res.degraded)
    report(5, ok, f"max|omega(t_f)|={final:.3e} rad/s, max|p|={pmax:.3f} pu, t_f={cfg.t_final_s} s")


def test_criterion_6_projection_and_dual_invariants():
    rng = np.random.default_rng(0)
    ocp, nlp = case_one(3, "linear")
    c = nlp.coupling
    z = rng.normal(size=c.n_z)
    idem = float(np.abs(c.average(c.average(z)) - c.average(z)).max())

    small, snlp = case_one(2, "linear", horizon=2)
    sc = snlp.coupling
    zs = rng.normal(size=sc.n_z)
    brute = float(np.abs(sc.average(zs) - pinv_projector(sc) @ zs).max())

    _, qnlp = case_one(2, "linear", horizon=5)
    qps = [affine_qp(s) for s in qnlp.subsystems]
    cc = qnlp.coupling
    cfg = AdmmConfig(rho=1.0, l_max=1, qp_tol=1e-8)
    solvers = make_local_solvers(qps, cfg.rho)
    state = IterateState.zeros(cc.dims)
    worst = 0.0
    for _ in range(1000):
        state, _ = admm_solve(qps, cc, state, cfg, solvers=solvers)
        worst = max(worst, float(np.abs(cc.average(cc.stack(state.gamma))).max()))
    dual_ok = worst <= 1e-10 and check_dual_condition(cc, cc.stack(state.gamma), tol=1e-10)
    ok = idem <= 1e-12 and brute <= 1e-10 and dual_ok
    report(6, ok, f"idempotence {idem:.1e}, projector {brute:.1e}, dual condition over 1e3 iterations {worst:.1e}")


def test_criterion_7_numerical_checks():
    rng = np.random.default_rng(1)
    model, state = generate_network(ScenarioConfig(case=1, grid_side=2))
    ocp = GridOCP(model, 3, 0.1, "nonlinear")
    sub = ocp.problem(state).subsystems[0]
    jac = 0.0
    for _ in range(10):
        z = rng.normal(size=sub.dim) * 0.5
        jac = max(jac, relative_fd_error(sub.eq, sub.eq_jacobian, z),
                  relative_fd_error(sub.ineq, sub.ineq_jacobian, z))

    m1, _ = generate_network(ScenarioConfig(case=1, grid_side=1, seed=3))
    dyn = SubsystemDynamics(m1, 0, "nonlinear")
    st = PlantState(rng.uniform(-0.5, 0.5, m1.n_bus), rng.uniform(-1, 1, m1.n_bus), np.zeros(m1.n_bus))
    u = rng.uniform(-0.3, 0.3, dyn.ng)
    p = np.zeros(m1.n_bus)
    p[dyn.info.generators] = u
    errs = []
    for delta in (0.1, 0.05):
        ref = plant_step(st, p, delta, m1, substeps=400)
        step = dyn.step(dyn.local_state(st), u, np.zeros(0), np.zeros(dyn.nl), delta)
        errs.append(np.abs(step - dyn.local_state(ref)).max())
    ratio = errs[0] / errs[1]

    bus = single_bus()
    s = PlantState(np.zeros(1), np.array([1.0]), np.zeros(1))
    decay = 0.0
    for k in range(1, 11):
        s = plant_step(s, np.zeros(1), 0.1, bus)
        decay = max(decay, abs(s.omega[0] - np.exp(-LAM * 0.1 * k)))
    ok = jac <= 1e-6 and 6 <= ratio <= 10 and decay <= 1e-9
    report(7, ok, f"Jacobian rel. error {jac:.1e}, Richardson ratio {ratio:.2f}, decay error {decay:.1e}")


def test_criterion_8_certificate_cross_check(qp_oracles):
    ocp, nlp = case_one(2, "nonlinear", horizon=10)
    logged(centralized_nlp_solve(nlp), nlp)
    worst = max(abs(folded_residual(n, r) - r.r) for n, r in ORACLE_LOG)
    report(8, worst <= 1e-10, f"{len(ORACLE_LOG)} oracle solves, max |r_recomputed - r_reported| = {worst:.1e}")
