"""Small convex QPs solved by operator splitting.

The solver follows the usual OSQP splitting for

    min  z'Hz/2 + q'z   s.t.  Aeq z = beq,  Aineq z <= bineq

with over-relaxation, a cached factorization of the reduced system
``H + sigma I + A' R A`` and termination on the full KKT certificate
checked every few iterations. An optional polishing step solves the
equality-constrained KKT system on the guessed active set and is what
gets the centralized oracle to tight tolerances.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .problem import DimensionError

log = logging.getLogger(__name__)

SOLVED = "solved"
MAX_ITER = "max-iter"
INFEASIBLE = "infeasible"


def _csr(M, shape):
    M = sp.csr_matrix(M, dtype=float) if M is not None else sp.csr_matrix(shape)
    if M.shape != shape:
        raise DimensionError(f"matrix has shape {M.shape}, expected {shape}")
    return M


@dataclass
class QPData:
    """``min z'Hz/2 + q'z  s.t.  Aeq z = beq, Aineq z <= bineq``."""

    H: sp.spmatrix
    q: np.ndarray
    Aeq: sp.spmatrix | None = None
    beq: np.ndarray | None = None
    Aineq: sp.spmatrix | None = None
    bineq: np.ndarray | None = None

    def __post_init__(self):
        self.q = np.asarray(self.q, dtype=float).ravel()
        n = self.q.size
        self.beq = np.zeros(0) if self.beq is None else np.asarray(self.beq, dtype=float).ravel()
        self.bineq = np.zeros(0) if self.bineq is None else np.asarray(self.bineq, dtype=float).ravel()
        self.H = _csr(self.H, (n, n))
        self.Aeq = _csr(self.Aeq, (self.beq.size, n))
        self.Aineq = _csr(self.Aineq, (self.bineq.size, n))

    @property
    def n(self):
        return self.q.size

    @property
    def n_eq(self):
        return self.beq.size

    @property
    def n_ineq(self):
        return self.bineq.size

    def check(self, sym_tol=1e-12, psd_tol=1e-10):
        """Raise if ``H`` is not symmetric positive semidefinite (dense check)."""
        asym = abs(self.H - self.H.T)
        if asym.nnz and asym.max() > sym_tol:
            raise ValueError("H is not symmetric")
        if self.n and np.linalg.eigvalsh(self.H.toarray()).min() < -psd_tol:
            raise ValueError("H is not positive semidefinite")
        return self


@dataclass
class QPSolution:
    z: np.ndarray
    nu: np.ndarray
    mu: np.ndarray
    status: str
    kkt: float
    iterations: int = 0
    polished: bool = False


@dataclass
class QPSettings:
    rho: float = 0.1
    sigma: float = 1e-6
    alpha: float = 1.6
    eq_rho_scale: float = 1e3
    check_every: int = 5
    adaptive_rho: bool = True
    adaptive_rho_tolerance: float = 5.0
    polish: bool = False
    polish_delta: float = 1e-9
    polish_refine: int = 4
    polish_rounds: int = 5
    polish_every: int = 25
    eps_pinf: float = 1e-7


def kkt_certificate(qp: QPData, z, nu, mu):
    """Max of stationarity, feasibility, dual sign and complementarity violations."""
    parts = [np.abs(qp.H @ z + qp.q + qp.Aeq.T @ nu + qp.Aineq.T @ mu)]
    if qp.n_eq:
        parts.append(np.abs(qp.Aeq @ z - qp.beq))
    if qp.n_ineq:
        slack = qp.Aineq @ z - qp.bineq
        parts += [np.maximum(slack, 0.0), np.maximum(-mu, 0.0), np.abs(mu * slack)]
    return float(max((p.max() for p in parts if p.size), default=0.0))


def _factorize(K):
    # symmetric (quasi-)definite: keep the fill-reducing order, no pivoting
    return spla.splu(sp.csc_matrix(K), permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.0,
                     options=dict(SymmetricMode=True))


class QPSolver:
    """Warm-startable solver instance for one QP structure.

    The factorization is kept across calls to :meth:`solve`; changing only
    ``q`` or the right-hand sides through :meth:`update` does not refactor.
    """

    def __init__(self, qp: QPData, settings: QPSettings | None = None):
        self.settings = settings or QPSettings()
        self.factorizations = 0
        self._load(qp)
        self.x = np.zeros(self.n)
        self.zs = np.clip(np.zeros(self.m), self.lo, self.hi)
        self.y = np.zeros(self.m)

    # -- data -------------------------------------------------------------
    def _load(self, qp):
        self.qp = qp
        self.n, self.meq = qp.n, qp.n_eq
        self.m = qp.n_eq + qp.n_ineq
        self.P = qp.H
        self.A = sp.vstack([qp.Aeq, qp.Aineq], format="csr")
        self.AT = self.A.T.tocsr()
        self._set_bounds(qp)
        self.rho = self.settings.rho
        self._factor()

    def _set_bounds(self, qp):
        self.q = qp.q
        self.lo = np.concatenate([qp.beq, np.full(qp.n_ineq, -np.inf)])
        self.hi = np.concatenate([qp.beq, qp.bineq])

    def _rho_vec(self):
        r = np.full(self.m, self.rho)
        r[: self.meq] *= self.settings.eq_rho_scale
        return r

    def _factor(self):
        self.rho_vec = self._rho_vec()
        K = self.P + self.settings.sigma * sp.identity(self.n, format="csr")
        if self.m:
            K = K + self.AT @ sp.diags(self.rho_vec) @ self.A
        self._lu = _factorize(K)
        self.factorizations += 1

    def update(self, q=None, beq=None, bineq=None):
        """Change vectors of the QP without refactoring."""
        qp = self.qp
        self.qp = replace(qp,
                          q=qp.q if q is None else q,
                          beq=qp.beq if beq is None else beq,
                          bineq=qp.bineq if bineq is None else bineq)
        if self.qp.q.size != self.n or self.qp.n_eq != qp.n_eq or self.qp.n_ineq != qp.n_ineq:
            raise DimensionError("update changes problem dimensions")
        self._set_bounds(self.qp)

    def warm_start(self, z=None, nu=None, mu=None):
        if z is not None:
            self.x = np.array(z, dtype=float)
            self.zs = self.A @ self.x
        if nu is not None or mu is not None:
            nu = np.zeros(self.meq) if nu is None else np.asarray(nu, dtype=float)
            mu = np.zeros(self.m - self.meq) if mu is None else np.asarray(mu, dtype=float)
            self.y = np.concatenate([nu, mu])
        self.zs = np.clip(self.zs, self.lo, self.hi)

    # -- iteration --------------------------------------------------------
    def _duals(self, y):
        return y[: self.meq], np.maximum(y[self.meq:], 0.0)

    def _certificate(self, x, y):
        nu, mu = self._duals(y)
        return kkt_certificate(self.qp, x, nu, mu)

    def _adapt_rho(self):
        s = self.settings
        Ax = self.A @ self.x
        Px = self.P @ self.x
        ATy = self.AT @ self.y
        prim = np.abs(Ax - self.zs).max() / max(np.abs(Ax).max(), np.abs(self.zs).max(), 1e-10)
        dual = np.abs(Px + self.q + ATy).max() / max(
            np.abs(Px).max(), np.abs(ATy).max(), np.abs(self.q).max() if self.n else 0.0, 1e-10)
        if dual <= 0 or prim <= 0:
            return
        new = float(np.clip(self.rho * np.sqrt(prim / dual), 1e-6, 1e6))
        if new > s.adaptive_rho_tolerance * self.rho or new < self.rho / s.adaptive_rho_tolerance:
            self.rho = new
            self._factor()

    def _infeasible(self, dy):
        norm = np.abs(dy).max() if dy.size else 0.0
        if norm < 1e-12:
            return False
        dy = dy / norm
        eps = self.settings.eps_pinf
        if np.abs(self.AT @ dy).max() > eps:
            return False
        neg = dy < -eps
        if np.any(np.isinf(self.lo[neg])):
            return False
        val = self.hi @ np.maximum(dy, 0.0) + self.lo[neg] @ dy[neg]
        return bool(val < -eps)

    def _polish_once(self, active):
        meq = self.meq
        Aact = sp.vstack([self.qp.Aeq, self.qp.Aineq[active]], format="csc")
        b = np.concatenate([self.qp.beq, self.qp.bineq[active]])
        k = Aact.shape[0]
        d = self.settings.polish_delta
        K = sp.bmat([[self.P, Aact.T], [Aact, None]], format="csc")
        Kreg = K + sp.block_diag([d * sp.identity(self.n), -d * sp.identity(k)], format="csc")
        try:
            lu = _factorize(Kreg)
        except RuntimeError:
            return None
        rhs = np.concatenate([-self.q, b])
        sol = lu.solve(rhs)
        for _ in range(self.settings.polish_refine):
            sol = sol + lu.solve(rhs - K @ sol)
        if not np.all(np.isfinite(sol)):
            return None
        y = np.zeros(self.m)
        y[:meq] = sol[self.n: self.n + meq]
        y[meq + active] = sol[self.n + meq:]
        return sol[: self.n], y

    def _polish(self, tol):
        """Equality-constrained solve on a guessed active set.

        The guess starts from the positive inequality duals and is
        corrected a few times: violated rows join, rows with negative
        multipliers leave.
        """
        meq = self.meq
        active = np.flatnonzero(self.y[meq:] > 0.0)
        out = None
        for _ in range(self.settings.polish_rounds):
            out = self._polish_once(active)
            if out is None:
                return None
            x, y = out
            mu = y[meq:]
            slack = self.qp.Aineq @ x - self.qp.bineq
            keep = np.zeros(self.m - meq, dtype=bool)
            keep[active] = mu[active] >= -tol
            keep |= slack > tol
            nxt = np.flatnonzero(keep)
            if np.array_equal(nxt, active):
                break
            active = nxt
        return out

    def solve(self, tol=1e-6, max_iter=4000) -> QPSolution:
        s = self.settings
        if tol <= 0:
            raise ValueError("tol must be positive")
        alpha, sigma = s.alpha, s.sigma
        x, zs, y = self.x, self.zs, self.y
        best = None
        y_check = y.copy()
        tried_polish = None
        next_polish = 0
        it = 0
        status = MAX_ITER
        for it in range(1, max_iter + 1):
            rhs = sigma * x - self.q
            if self.m:
                rhs = rhs + self.AT @ (self.rho_vec * zs - y)
            xt = self._lu.solve(rhs)
            zt = self.A @ xt
            x = alpha * xt + (1.0 - alpha) * x
            zh = alpha * zt + (1.0 - alpha) * zs
            zn = np.clip(zh + y / self.rho_vec, self.lo, self.hi)
            y = y + self.rho_vec * (zh - zn)
            zs = zn
            if it != 1 and it % s.check_every and it != max_iter:
                continue
            self.x, self.zs, self.y = x, zs, y
            cert = self._certificate(x, y)
            if best is None or cert < best[0]:
                best = (cert, x.copy(), y.copy(), it)
            if cert <= tol:
                status = SOLVED
                break
            if s.polish and cert <= max(1e4 * tol, 1e-4) and it >= next_polish:
                key = tuple(np.flatnonzero(y[self.meq:] > 0))
                if key != tried_polish:
                    tried_polish = key
                    next_polish = it + s.polish_every
                    pol = self._polish(tol)
                    if pol is not None:
                        pc = self._certificate(*pol)
                        if pc <= tol:
                            x, y = pol
                            self.x, self.y = x, y
                            self.zs = zs = np.clip(self.A @ x, self.lo, self.hi)
                            return self._result(x, y, SOLVED, pc, it, polished=True)
            if self.m and self._infeasible(y - y_check):
                status = INFEASIBLE
                break
            y_check = y.copy()
            if s.adaptive_rho and self.m:
                self._adapt_rho()
        self.x, self.zs, self.y = x, zs, y
        if status == SOLVED:
            return self._result(x, y, status, cert, it)
        if status == INFEASIBLE:
            log.debug("primal infeasibility certificate after %d iterations", it)
            return self._result(x, y, status, self._certificate(x, y), it)
        cert, bx, by, _ = best
        return self._result(bx, by, MAX_ITER, cert, it)

    def _result(self, x, y, status, cert, it, polished=False):
        nu, mu = self._duals(y)
        return QPSolution(z=x.copy(), nu=nu.copy(), mu=mu.copy(), status=status,
                          kkt=float(cert), iterations=it, polished=polished)


def solve_qp(qp: QPData, warm: QPSolution | None = None, tol=1e-8, max_iter=10000,
             settings: QPSettings | None = None) -> QPSolution:
    """One-shot solve. Polishing is on unless ``settings`` says otherwise."""
    settings = settings or QPSettings(polish=True)
    solver = QPSolver(qp, settings)
    if warm is not None:
        solver.warm_start(warm.z, warm.nu, warm.mu)
    return solver.solve(tol=tol, max_iter=max_iter)


def build_local_subproblem(qp: QPData, z_bar, gamma, rho) -> QPData:
    """QP whose minimizer is ``argmin f_qp(z) + gamma'(z - z_bar) + rho |z - z_bar|^2 / 2``.

    Constant terms are dropped, so the objective value differs from the
    augmented Lagrangian by ``-gamma'z_bar + rho |z_bar|^2 / 2``.
    """
    if rho <= 0:
        raise ValueError("rho must be positive")
    z_bar = np.asarray(z_bar, dtype=float)
    gamma = np.asarray(gamma, dtype=float)
    if z_bar.shape != (qp.n,) or gamma.shape != (qp.n,):
        raise DimensionError("z_bar/gamma do not match the QP dimension")
    return QPData(H=qp.H + rho * sp.identity(qp.n, format="csr"),
                  q=qp.q + gamma - rho * z_bar,
                  Aeq=qp.Aeq, beq=qp.beq, Aineq=qp.Aineq, bineq=qp.bineq)


__all__ = ["QPData", "QPSettings", "QPSolution", "QPSolver", "SOLVED", "MAX_ITER",
           "INFEASIBLE", "build_local_subproblem", "kkt_certificate", "solve_qp"]
