"""Bi-level decentralized SQP and its real-time iteration driver.

The outer loop linearizes every subsystem at ``z^k`` (Gauss-Newton
Hessian), the inner loop runs consensus ADMM on the resulting convex QP
in step coordinates ``d = z - z^k``, and ``z^{k+1} = z^k + d_bar``.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .admm import AdmmConfig, SolverError, admm_solve, kkt_residual, make_local_solvers, parallel_map
from .problem import IterateState, PartialNLP, SubsystemProblem, check_dual_condition
from .qp import QPData, QPSettings

log = logging.getLogger(__name__)


@dataclass
class DsqpConfig:
    k_max: int = 1
    l_max: int = 10
    rho: float = 1.0
    kkt_tol: float | None = None
    hessian: str = "gauss-newton"
    inner_kkt_tol: float | None = None
    kkt_check_period: int = 10
    qp_tol: float = 1e-6
    qp_max_iter: int = 10000
    qp_settings: QPSettings | None = None
    threads: int | None = None

    def __post_init__(self):
        if self.k_max < 1:
            raise ValueError("k_max must be >= 1")
        if self.l_max < 0:
            raise ValueError("l_max must be >= 0")
        if self.rho <= 0:
            raise ValueError("rho must be positive")
        if self.hessian not in ("gauss-newton", "exact"):
            raise ValueError("hessian must be 'gauss-newton' or 'exact'")

    def admm(self):
        return AdmmConfig(rho=self.rho, l_max=self.l_max, kkt_tol=self.inner_kkt_tol,
                          kkt_check_period=self.kkt_check_period, qp_tol=self.qp_tol,
                          qp_max_iter=self.qp_max_iter, qp_settings=self.qp_settings,
                          threads=self.threads)


@dataclass
class RtiState:
    """Primal/dual warm start carried between outer iterations and control steps."""

    z: list
    gamma: list
    nu: list | None = None
    mu: list | None = None
    step_index: int = 0
    u_prev: np.ndarray | None = None

    @classmethod
    def zeros(cls, nlp: PartialNLP):
        d = nlp.dims
        return cls(z=[np.zeros(n) for n in d], gamma=[np.zeros(n) for n in d])

    def copy(self):
        cp = lambda xs: None if xs is None else [np.array(x) for x in xs]
        return RtiState(cp(self.z), cp(self.gamma), cp(self.nu), cp(self.mu), self.step_index,
                        None if self.u_prev is None else self.u_prev.copy())

    def iterate(self):
        return IterateState(z=self.z, z_bar=self.z, gamma=self.gamma, nu=self.nu, mu=self.mu)


@dataclass
class DsqpStats:
    outer_iterations: int = 0
    inner_iterations: list = field(default_factory=list)
    kkt_history: list = field(default_factory=list)
    linearize_time: list = field(default_factory=list)
    admm_time: list = field(default_factory=list)
    converged: bool = False

    @property
    def total_inner(self):
        return int(sum(self.inner_iterations))

    @property
    def final_kkt(self):
        return self.kkt_history[-1] if self.kkt_history else float("nan")


def _convexify(M, floor=1e-8):
    w, V = np.linalg.eigh(0.5 * (M + M.T))
    return (V * np.maximum(w, floor)) @ V.T


def linearize(sub: SubsystemProblem, z_k, exact_hessian=False, nu=None, mu=None) -> QPData:
    """QP in step coordinates ``d = z - z_k``.

    ``H`` is the Gauss-Newton Hessian of the objective; with
    ``exact_hessian`` the constraint curvature weighted by ``(nu, mu)`` is
    added and the sum is convexified by eigenvalue clipping.
    """
    z_k = np.asarray(z_k, dtype=float)
    q = sub.gradient(z_k)
    g, h = sub.eq(z_k), sub.ineq(z_k)
    Jg, Jh = sub.eq_jacobian(z_k), sub.ineq_jacobian(z_k)
    for name, v in (("gradient", q), ("equalities", g), ("inequalities", h)):
        if not np.all(np.isfinite(v)):
            raise FloatingPointError(f"non-finite {name} during linearization")
    H = sub.hessian(z_k)
    if exact_hessian:
        nu = np.zeros(sub.n_eq) if nu is None else nu
        mu = np.zeros(sub.n_ineq) if mu is None else mu
        Hd = H.toarray() if sp.issparse(H) else np.asarray(H, dtype=float)
        C = sub.constraint_hessian(z_k, nu, mu)
        Hd = Hd + (C.toarray() if sp.issparse(C) else C)
        H = sp.csr_matrix(_convexify(Hd))
    return QPData(H, q, Jg, -g, Jh, -h)


def affine_qp(sub: SubsystemProblem, z0=None) -> QPData:
    """Model of ``sub`` in absolute coordinates, exact when ``sub`` is a QP."""
    z0 = np.zeros(sub.dim) if z0 is None else np.asarray(z0, dtype=float)
    H = sub.hessian(z0)
    Jg, Jh = sub.eq_jacobian(z0), sub.ineq_jacobian(z0)
    return QPData(H, sub.gradient(z0) - H @ z0, Jg, Jg @ z0 - sub.eq(z0), Jh, Jh @ z0 - sub.ineq(z0))


def _shifted_residual(nlp, z_k):
    def r(st):
        z = [zk + d for zk, d in zip(z_k, st.z)]
        return kkt_residual(nlp, IterateState(z=z, z_bar=z, gamma=st.gamma, nu=st.nu, mu=st.mu))
    return r


def dsqp_solve(nlp: PartialNLP, init: RtiState, cfg: DsqpConfig, solvers=None):
    """Run up to ``k_max`` outer iterations of decentralized SQP.

    ``init.z`` must be consensus feasible and ``init.gamma`` satisfy the
    dual initialization condition. With ``cfg.kkt_tol`` set, the outer
    loop stops once the NLP KKT residual at ``z^{k+1}`` drops below it.
    ``solvers`` may hold pre-factorized local solvers, valid only while
    the QP Hessians stay constant (Gauss-Newton on a quadratic objective).

    Returns ``(RtiState, DsqpStats)``.
    """
    coupling = nlp.coupling
    if not check_dual_condition(coupling, coupling.stack(init.gamma), tol=1e-8):
        raise ValueError("initial gamma violates the dual initialization condition")
    z = [np.asarray(v, dtype=float).copy() for v in init.z]
    gamma = [np.asarray(v, dtype=float).copy() for v in init.gamma]
    nu = None if init.nu is None else [np.array(v) for v in init.nu]
    mu = None if init.mu is None else [np.array(v) for v in init.mu]
    exact = cfg.hessian == "exact"
    acfg = cfg.admm()
    stats = DsqpStats()
    zero = [np.zeros(n) for n in nlp.dims]

    for k in range(cfg.k_max):
        t0 = time.perf_counter()

        def lin(i):
            return linearize(nlp.subsystems[i], z[i], exact,
                             None if nu is None else nu[i], None if mu is None else mu[i])
        try:
            qps = parallel_map(lin, range(len(z)), cfg.threads)
        except FloatingPointError as exc:
            raise SolverError(f"linearization failed at outer iteration {k}: {exc}", iteration=k) from exc
        if solvers is None or exact:
            local = make_local_solvers(qps, cfg.rho, cfg.qp_settings, cfg.threads)
        else:
            local = solvers
        stats.linearize_time.append(time.perf_counter() - t0)

        t0 = time.perf_counter()
        start = IterateState(z=zero, z_bar=zero, gamma=gamma, nu=nu, mu=mu)
        try:
            res, ast = admm_solve(qps, coupling, start, acfg, residual=_shifted_residual(nlp, z),
                                  solvers=local)
        except SolverError as exc:
            raise SolverError(f"outer iteration {k}: {exc}", subsystem=exc.subsystem,
                              iteration=k, status=exc.status) from exc
        stats.admm_time.append(time.perf_counter() - t0)
        if ast.iterations_run:
            z = [zk + d for zk, d in zip(z, res.z_bar)]
            gamma, nu, mu = res.gamma, res.nu, res.mu
        stats.inner_iterations.append(ast.iterations_run)
        stats.outer_iterations = k + 1
        if cfg.kkt_tol is not None:
            r = kkt_residual(nlp, IterateState(z=z, z_bar=z, gamma=gamma, nu=nu, mu=mu))
            stats.kkt_history.append(r)
            if r <= cfg.kkt_tol:
                stats.converged = True
                break

    out = RtiState(z=z, gamma=gamma, nu=nu, mu=mu, step_index=init.step_index, u_prev=init.u_prev)
    return out, stats


def rti_control_step(nlp_t: PartialNLP, state: RtiState, cfg: DsqpConfig, solvers=None):
    """One dRTI control step at the measured state embedded in ``nlp_t``.

    Warm-starts from ``state`` without shifting, runs ``k_max`` outer and
    exactly ``l_max`` inner iterations each, and returns
    ``(u0, new_state, info)``. ``u0`` always lies in the input box. With
    ``l_max = 0`` the first input of the warm start is applied. On an
    inner failure the previous input is held and ``info["degraded"]`` set.
    """
    info = {"degraded": False, "inner_iterations": 0, "error": None}
    run_cfg = cfg
    if cfg.kkt_tol is not None or cfg.inner_kkt_tol is not None:
        run_cfg = DsqpConfig(**{**cfg.__dict__, "kkt_tol": None, "inner_kkt_tol": None})
    if cfg.l_max == 0:
        new = state.copy()
    else:
        try:
            new, st = dsqp_solve(nlp_t, state, run_cfg, solvers=solvers)
            info["inner_iterations"] = st.total_inner
            info["stats"] = st
        except (SolverError, FloatingPointError) as exc:
            log.warning("control step %d degraded: %s", state.step_index, exc)
            info.update(degraded=True, error=str(exc))
            new = state.copy()
            u_hold = state.u_prev if state.u_prev is not None else nlp_t.first_inputs(state.z)
            new.u_prev = np.array(u_hold)
            new.step_index = state.step_index + 1
            return new.u_prev.copy(), new, info
    u0 = nlp_t.first_inputs(new.z)
    new.u_prev = u0.copy()
    new.step_index = state.step_index + 1
    return u0, new, info


__all__ = ["DsqpConfig", "DsqpStats", "RtiState", "affine_qp", "dsqp_solve", "linearize",
           "rti_control_step"]
