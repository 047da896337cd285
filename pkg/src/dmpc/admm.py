"""Two-block consensus ADMM over subsystem QPs.

Each iteration solves every subsystem's augmented-Lagrangian QP (in
parallel when allowed), projects the stacked result onto the consensus
set by group averaging, and takes a dual ascent step on ``gamma``.
"""

from __future__ import annotations

import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .problem import ConsensusCoupling, IterateState, PartialNLP, QuadraticSubsystem, check_dual_condition
from .qp import QPSettings, QPSolver, build_local_subproblem


class SolverError(RuntimeError):
    """A subsystem QP failed; ``subsystem`` and ``iteration`` locate it."""

    def __init__(self, msg, subsystem=None, iteration=None, status=None):
        super().__init__(msg)
        self.subsystem = subsystem
        self.iteration = iteration
        self.status = status


def worker_count(n_tasks, threads=None):
    if threads is None:
        threads = int(os.environ.get("DMPC_THREADS", "1") or 1)
    return max(1, min(int(threads), n_tasks))


def parallel_map(fn, items, threads=None):
    """``list(map(fn, items))``, threaded when more than one worker is allowed."""
    items = list(items)
    w = worker_count(len(items), threads)
    if w == 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=w) as ex:
        return list(ex.map(fn, items))


@dataclass
class AdmmConfig:
    rho: float = 1.0
    l_max: int = 100
    kkt_tol: float | None = None
    kkt_check_period: int = 10
    qp_tol: float = 1e-6
    qp_max_iter: int = 10000
    qp_settings: QPSettings | None = None
    threads: int | None = None
    record_kkt: bool = False

    def __post_init__(self):
        if self.rho <= 0:
            raise ValueError("rho must be positive")
        if self.l_max < 0:
            raise ValueError("l_max must be nonnegative")
        if self.kkt_check_period < 1:
            raise ValueError("kkt_check_period must be >= 1")


@dataclass
class AdmmStats:
    iterations_run: int = 0
    kkt_history: list = field(default_factory=list)   # (iteration, r)
    per_iteration_time: list = field(default_factory=list)
    per_subsystem_solve_status: list = field(default_factory=list)
    qp_iterations: int = 0
    converged: bool = False

    @property
    def final_kkt(self):
        return self.kkt_history[-1][1] if self.kkt_history else float("nan")


def kkt_residual(nlp: PartialNLP, state: IterateState) -> float:
    """Centralized KKT residual ``r`` of the partially separable NLP.

    Per subsystem the Lagrangian gradient uses ``gamma_i`` for consensus;
    the primal terms are evaluated at the local ``state.z``. The coupling
    term is ``E z`` at the stacked local iterate.
    """
    if state.nu is None or state.mu is None:
        raise ValueError("kkt_residual needs local multipliers nu and mu")
    r = 0.0
    for i, sub in enumerate(nlp.subsystems):
        z = np.asarray(state.z[i], dtype=float)
        nu, mu, gam = state.nu[i], state.mu[i], state.gamma[i]
        grad = sub.gradient(z) + gam
        if sub.n_eq:
            grad = grad + sub.eq_jacobian(z).T @ nu
            r = max(r, np.abs(sub.eq(z)).max())
        if sub.n_ineq:
            h = sub.ineq(z)
            grad = grad + sub.ineq_jacobian(z).T @ mu
            r = max(r, np.maximum(h, 0).max(), np.maximum(-mu, 0).max(), np.abs(mu * h).max())
        r = max(r, np.abs(grad).max())
    if nlp.coupling.n_c:
        zc = np.concatenate([np.asarray(z, dtype=float) for z in state.z])
        r = max(r, np.abs(nlp.coupling.residual(zc)).max())
    return float(r)


def qp_problem(qps, coupling) -> PartialNLP:
    """View a list of QPs as a PartialNLP (for residual evaluation)."""
    return PartialNLP([QuadraticSubsystem.from_qp(q) for q in qps], coupling)


def make_local_solvers(qps, rho, settings=None, threads=None):
    """Factorize ``H_i + rho I`` for every subsystem; reusable across ADMM runs."""
    def build(qp):
        return QPSolver(build_local_subproblem(qp, np.zeros(qp.n), np.zeros(qp.n), rho), settings)
    return parallel_map(build, qps, threads)


def admm_solve(qps, coupling: ConsensusCoupling, init: IterateState, cfg: AdmmConfig,
               residual=None, solvers=None):
    """Run consensus ADMM on ``min sum f_i^QP(z_i)`` s.t. ``z in E``.

    Parameters
    ----------
    qps : list of QPData
        Subsystem QPs (objective, linearized constraints).
    coupling : ConsensusCoupling
    init : IterateState
        ``z_bar`` must be consensus feasible and ``gamma`` must satisfy the
        dual initialization condition. ``z``/``nu``/``mu`` only warm-start
        the local QP solvers.
    cfg : AdmmConfig
    residual : callable, optional
        ``residual(state) -> float`` used for early termination; defaults
        to the centralized KKT residual of the QPs themselves.
    solvers : list of QPSolver, optional
        Pre-factorized local solvers from :func:`make_local_solvers` with
        the same ``rho``.

    Returns
    -------
    state : IterateState
        ``z_bar`` and ``gamma`` after the last iteration, plus the last
        local primal ``z`` and multipliers ``nu``, ``mu``.
    stats : AdmmStats
    """
    S = len(qps)
    dims = tuple(q.n for q in qps)
    if dims != coupling.dims:
        raise ValueError(f"QP dims {dims} do not match coupling dims {coupling.dims}")
    z_bar = coupling.stack(init.z_bar)
    gamma = coupling.stack(init.gamma)
    if not check_dual_condition(coupling, gamma, tol=1e-8):
        raise ValueError("initial gamma violates the dual initialization condition")
    if np.abs(coupling.average(z_bar) - z_bar).max(initial=0.0) > 1e-8:
        raise ValueError("initial z_bar is not consensus feasible")

    rho = cfg.rho
    if solvers is None:
        solvers = make_local_solvers(qps, rho, cfg.qp_settings, cfg.threads)
    elif len(solvers) != S:
        raise ValueError("one local solver per subsystem required")

    if init.nu is not None:
        for i, s in enumerate(solvers):
            s.warm_start(z=None if init.z is None else init.z[i], nu=init.nu[i],
                         mu=None if init.mu is None else init.mu[i])
    elif init.z is not None:
        for i, s in enumerate(solvers):
            s.warm_start(z=init.z[i])

    if residual is None:
        nlp = qp_problem(qps, coupling)
        residual = lambda st: kkt_residual(nlp, st)

    stats = AdmmStats()
    gam = coupling.split(gamma)
    zb = coupling.split(z_bar)
    zl = [np.array(init.z[i], dtype=float) if init.z is not None else zb[i].copy() for i in range(S)]
    nu = [np.zeros(q.n_eq) for q in qps] if init.nu is None else [np.array(v, dtype=float) for v in init.nu]
    mu = [np.zeros(q.n_ineq) for q in qps] if init.mu is None else [np.array(v, dtype=float) for v in init.mu]
    status = ["not-run"] * S
    check = cfg.kkt_tol is not None or cfg.record_kkt

    def local(i, l):
        solver = solvers[i]
        solver.update(q=qps[i].q + gam[i] - rho * zb[i], beq=qps[i].beq, bineq=qps[i].bineq)
        sol = solver.solve(tol=cfg.qp_tol, max_iter=cfg.qp_max_iter)
        if sol.status == "infeasible":
            raise SolverError(f"subsystem {i} QP infeasible at ADMM iteration {l}",
                              subsystem=i, iteration=l, status=sol.status)
        return sol

    for l in range(cfg.l_max):
        t0 = time.perf_counter()
        sols = parallel_map(lambda i: local(i, l), range(S), cfg.threads)
        for i, sol in enumerate(sols):
            zl[i], nu[i], mu[i] = sol.z, sol.nu, sol.mu
            status[i] = sol.status
            stats.qp_iterations += sol.iterations
        z = coupling.stack(zl)
        z_bar = coupling.average(z)
        gamma = gamma + rho * (z - z_bar)
        zb = coupling.split(z_bar)
        gam = coupling.split(gamma)
        stats.per_iteration_time.append(time.perf_counter() - t0)
        stats.iterations_run = l + 1
        if check and ((l + 1) % cfg.kkt_check_period == 0 or l + 1 == cfg.l_max):
            st = IterateState(z=zl, z_bar=zb, gamma=gam, nu=nu, mu=mu)
            r = residual(st)
            if not np.isfinite(r):
                raise SolverError(f"non-finite KKT residual at ADMM iteration {l + 1}", iteration=l)
            stats.kkt_history.append((l + 1, r))
            if cfg.kkt_tol is not None and r <= cfg.kkt_tol:
                stats.converged = True
                break

    stats.per_subsystem_solve_status = status
    out = IterateState(z=[np.array(v) for v in zl], z_bar=zb, gamma=gam,
                       nu=[np.array(v) for v in nu], mu=[np.array(v) for v in mu])
    return out, stats


__all__ = ["AdmmConfig", "AdmmStats", "SolverError", "admm_solve", "kkt_residual",
           "make_local_solvers", "parallel_map", "qp_problem"]
