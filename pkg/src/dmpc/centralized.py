"""Centralized high-accuracy reference solutions.

The stacked problem keeps every subsystem block and adds the consensus
equalities ``E z = 0`` as explicit constraints. QPs go to the polished
splitting solver; NLPs are solved by damped full-step Gauss-Newton SQP
on top of it.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .admm import SolverError, kkt_residual
from .dsqp import affine_qp, linearize
from .problem import IterateState, PartialNLP, SubsystemProblem, build_coupling
from .qp import SOLVED, QPData, QPSettings, QPSolver, kkt_certificate

log = logging.getLogger(__name__)


@dataclass
class OracleConfig:
    kkt_tol: float = 1e-8
    max_outer: int = 200
    reg: float = 0.0
    qp_max_iter: int = 50000
    max_halvings: int = 20

    def __post_init__(self):
        if not self.kkt_tol > 0:
            raise ValueError("kkt_tol must be positive")
        if self.reg < 0:
            raise ValueError("reg must be nonnegative")


@dataclass
class OracleResult:
    """Stacked solution split per subsystem.

    ``lam`` are the multipliers of ``E z = 0`` and ``gamma = E' lam`` the
    implied consensus duals, so the decentralized KKT residual can be
    evaluated at the oracle point as well.
    """

    z: list
    nu: list
    mu: list
    lam: np.ndarray
    gamma: list
    r: float
    status: str
    iterations: int = 0

    def __iter__(self):
        yield self.z
        yield (self.nu, self.mu, self.lam)
        yield self.r

    @property
    def z_flat(self):
        return np.concatenate(self.z)

    def state(self):
        return IterateState(z=self.z, z_bar=self.z, gamma=self.gamma, nu=self.nu, mu=self.mu)


class StackedSubsystem(SubsystemProblem):
    """All subsystems as one block, consensus rows appended to ``g``."""

    def __init__(self, nlp: PartialNLP, reg=0.0):
        self.nlp = nlp
        self.E = nlp.coupling.matrix().tocsr()
        self.reg = reg
        self.dim = nlp.n_z
        self.n_eq = sum(s.n_eq for s in nlp.subsystems) + self.E.shape[0]
        self.n_ineq = sum(s.n_ineq for s in nlp.subsystems)

    def _parts(self, z):
        return self.nlp.split(np.asarray(z, dtype=float))

    def objective(self, z):
        return self.nlp.objective(self._parts(z)) + 0.5 * self.reg * float(np.dot(z, z))

    def gradient(self, z):
        g = np.concatenate([s.gradient(x) for s, x in zip(self.nlp.subsystems, self._parts(z))])
        return g + self.reg * np.asarray(z, dtype=float)

    def hessian(self, z):
        H = sp.block_diag([s.hessian(x) for s, x in zip(self.nlp.subsystems, self._parts(z))], format="csr")
        return H + self.reg * sp.identity(self.dim, format="csr") if self.reg else H

    def eq(self, z):
        local = [s.eq(x) for s, x in zip(self.nlp.subsystems, self._parts(z))]
        return np.concatenate(local + [self.E @ np.asarray(z, dtype=float)])

    def eq_jacobian(self, z):
        blocks = [s.eq_jacobian(x) for s, x in zip(self.nlp.subsystems, self._parts(z))]
        return sp.vstack([sp.block_diag(blocks), self.E], format="csr")

    def ineq(self, z):
        return np.concatenate([s.ineq(x) for s, x in zip(self.nlp.subsystems, self._parts(z))])

    def ineq_jacobian(self, z):
        return sp.block_diag([s.ineq_jacobian(x) for s, x in zip(self.nlp.subsystems, self._parts(z))],
                             format="csr")

    def unstack(self, z, nu, mu, r, status, iterations=0) -> OracleResult:
        nlp = self.nlp
        n_eq_loc = self.n_eq - self.E.shape[0]
        eq_dims = [s.n_eq for s in nlp.subsystems]
        in_dims = [s.n_ineq for s in nlp.subsystems]
        lam = np.asarray(nu[n_eq_loc:])
        return OracleResult(z=nlp.split(z), nu=np.split(nu[:n_eq_loc], np.cumsum(eq_dims)[:-1]),
                            mu=np.split(mu, np.cumsum(in_dims)[:-1]), lam=lam,
                            gamma=nlp.split(self.E.T @ lam), r=float(r), status=status,
                            iterations=iterations)


def stack_nlp(nlp: PartialNLP, reg=0.0) -> PartialNLP:
    """Single-subsystem NLP with consensus folded into the equalities."""
    sub = StackedSubsystem(nlp, reg)
    return PartialNLP([sub], build_coupling([], [sub.dim]))


def stack_qp(qps, coupling) -> QPData:
    """Block-diagonal QP with consensus rows ``E z = 0`` appended to ``Aeq``."""
    E = coupling.matrix()
    Aeq = sp.vstack([sp.block_diag([q.Aeq for q in qps]), E], format="csr")
    beq = np.concatenate([q.beq for q in qps] + [np.zeros(E.shape[0])])
    return QPData(H=sp.block_diag([q.H for q in qps], format="csr"),
                  q=np.concatenate([q.q for q in qps]), Aeq=Aeq, beq=beq,
                  Aineq=sp.block_diag([q.Aineq for q in qps], format="csr"),
                  bineq=np.concatenate([q.bineq for q in qps]))


def _settings():
    return QPSettings(polish=True)


def _solve_stacked(qp: QPData, tol, max_iter, warm=None):
    solver = QPSolver(qp, _settings())
    if warm is not None:
        solver.warm_start(*warm)
    return solver.solve(tol=tol, max_iter=max_iter)


def centralized_qp_solve(problem, cfg: OracleConfig | None = None, coupling=None, warm=None) -> OracleResult:
    """Solve a convex partially separable QP centrally.

    ``problem`` is a PartialNLP whose subsystems are quadratic with linear
    constraints, or a list of QPData together with ``coupling``. The
    reported ``r`` is the KKT certificate of the stacked QP.
    """
    cfg = cfg or OracleConfig()
    if isinstance(problem, PartialNLP):
        coupling = problem.coupling
        qps = [affine_qp(s) for s in problem.subsystems]
        nlp = problem
    else:
        if coupling is None:
            raise ValueError("coupling required when passing a list of QPs")
        qps = list(problem)
        from .admm import qp_problem
        nlp = qp_problem(qps, coupling)
    qp = stack_qp(qps, coupling)
    if cfg.reg:
        qp.H = qp.H + cfg.reg * sp.identity(qp.n, format="csr")
    sol = _solve_stacked(qp, cfg.kkt_tol, cfg.qp_max_iter, warm)
    r = kkt_certificate(qp, sol.z, sol.nu, sol.mu)
    status = SOLVED if r <= cfg.kkt_tol else sol.status
    if status != SOLVED:
        log.warning("centralized QP stopped with r = %.3e (%s)", r, sol.status)
    return StackedSubsystem(nlp, cfg.reg).unstack(sol.z, sol.nu, sol.mu, r, status, sol.iterations)


def centralized_nlp_solve(nlp: PartialNLP, init=None, cfg: OracleConfig | None = None) -> OracleResult:
    """Damped Gauss-Newton SQP on the stacked NLP.

    ``init`` is a list of per-subsystem points, an OracleResult (primal
    and dual warm start) or None (origin). Each full step is halved while
    the KKT residual increases, at most ``cfg.max_halvings`` times.
    Raises SolverError when damping is exhausted; returns the best
    iterate with status ``max-iter`` when ``max_outer`` runs out.
    """
    cfg = cfg or OracleConfig()
    S = StackedSubsystem(nlp, cfg.reg)
    wrap = PartialNLP([S], build_coupling([], [S.dim]))

    def resid(z, nu, mu):
        return kkt_residual(wrap, IterateState(z=[z], z_bar=[z], gamma=[np.zeros(S.dim)], nu=[nu], mu=[mu]))

    if isinstance(init, OracleResult):
        z = init.z_flat.copy()
        nu = np.concatenate(list(init.nu) + [init.lam])
        mu = np.concatenate(init.mu)
    else:
        z = np.zeros(S.dim) if init is None else nlp.stack(init)
        nu, mu = np.zeros(S.n_eq), np.zeros(S.n_ineq)
    r = resid(z, nu, mu)
    it = 0
    warm = None
    while r > cfg.kkt_tol and it < cfg.max_outer:
        qp = linearize(S, z)
        sol = _solve_stacked(qp, min(1e-10, 0.1 * cfg.kkt_tol), cfg.qp_max_iter,
                             warm=(np.zeros(S.dim), nu, mu) if warm is None else warm)
        d = sol.z
        t = 1.0
        for _ in range(cfg.max_halvings + 1):
            zt = z + t * d
            nut, mut = (1 - t) * nu + t * sol.nu, (1 - t) * mu + t * sol.mu
            rt = resid(zt, nut, mut)
            if rt < r:
                break
            t *= 0.5
        else:
            raise SolverError(f"step damping exhausted at SQP iteration {it} (r = {r:.3e})",
                              iteration=it, status="damping")
        z, nu, mu, r = zt, nut, mut, rt
        warm = (np.zeros(S.dim), nu, mu)
        it += 1
        log.debug("SQP iteration %d: r = %.3e, step %.3g", it, r, t)
    status = SOLVED if r <= cfg.kkt_tol else "max-iter"
    return S.unstack(z, nu, mu, r, status, it)


__all__ = ["OracleConfig", "OracleResult", "StackedSubsystem", "centralized_nlp_solve",
           "centralized_qp_solve", "stack_nlp", "stack_qp"]
