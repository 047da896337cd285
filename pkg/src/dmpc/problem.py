"""Partially separable NLPs with consensus coupling.

A problem is a list of subsystems, each owning a decision vector ``z_i``,
plus a set of copy/original pairs that tie entries of different subsystems
together (``sum_i E_i z_i = 0``). Stacked vectors are subsystem-major and
variables are addressed as ``(subsystem, local offset)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp


class CouplingError(ValueError):
    """Structural problem with a set of consensus pairs."""


class DimensionError(ValueError):
    pass


def _check_vec(v, n, name="vector"):
    v = np.asarray(v, dtype=float)
    if v.shape != (n,):
        raise DimensionError(f"{name} has shape {v.shape}, expected ({n},)")
    return v


class SubsystemProblem:
    """Evaluators of one subsystem ``min f(z) s.t. g(z) = 0, h(z) <= 0``.

    Subclasses implement the evaluators. Jacobians are returned as sparse
    matrices of shape ``(n_eq, dim)`` and ``(n_ineq, dim)``; ``hessian``
    is the Gauss-Newton (objective only) Hessian.
    """

    dim: int
    n_eq: int
    n_ineq: int

    def objective(self, z):
        raise NotImplementedError

    def gradient(self, z):
        raise NotImplementedError

    def hessian(self, z):
        raise NotImplementedError

    def eq(self, z):
        return np.zeros(0)

    def eq_jacobian(self, z):
        return sp.csr_matrix((0, self.dim))

    def ineq(self, z):
        return np.zeros(0)

    def ineq_jacobian(self, z):
        return sp.csr_matrix((0, self.dim))

    def constraint_hessian(self, z, nu, mu, eps=1e-6):
        """Second-order term ``sum nu_j d2 g_j + sum mu_j d2 h_j``.

        The default differentiates the weighted Jacobian-transpose product
        by central differences; subclasses may override with exact terms.
        """
        z = np.asarray(z, dtype=float)

        def wg(x):
            return self.eq_jacobian(x).T @ nu + self.ineq_jacobian(x).T @ mu

        C = np.empty((self.dim, self.dim))
        for j in range(self.dim):
            e = np.zeros(self.dim)
            e[j] = eps
            C[:, j] = (wg(z + e) - wg(z - e)) / (2 * eps)
        return 0.5 * (C + C.T)


class QuadraticSubsystem(SubsystemProblem):
    """``f = z'Hz/2 + q'z``, ``g = Aeq z - beq``, ``h = Aineq z - bineq``."""

    def __init__(self, H, q, Aeq=None, beq=None, Aineq=None, bineq=None):
        q = np.asarray(q, dtype=float).ravel()
        n = q.size
        self.dim = n
        self.H = sp.csr_matrix(H, shape=(n, n), dtype=float)
        self.q = q
        self.Aeq = sp.csr_matrix((0, n)) if Aeq is None else sp.csr_matrix(Aeq, dtype=float)
        self.beq = np.zeros(0) if beq is None else np.asarray(beq, dtype=float).ravel()
        self.Aineq = sp.csr_matrix((0, n)) if Aineq is None else sp.csr_matrix(Aineq, dtype=float)
        self.bineq = np.zeros(0) if bineq is None else np.asarray(bineq, dtype=float).ravel()
        if self.Aeq.shape != (self.beq.size, n) or self.Aineq.shape != (self.bineq.size, n):
            raise DimensionError("constraint matrix shapes do not match right-hand sides")
        self.n_eq = self.beq.size
        self.n_ineq = self.bineq.size

    @classmethod
    def from_qp(cls, qp):
        return cls(qp.H, qp.q, qp.Aeq, qp.beq, qp.Aineq, qp.bineq)

    def objective(self, z):
        return 0.5 * z @ (self.H @ z) + self.q @ z

    def gradient(self, z):
        return self.H @ z + self.q

    def hessian(self, z):
        return self.H

    def eq(self, z):
        return self.Aeq @ z - self.beq

    def eq_jacobian(self, z):
        return self.Aeq

    def ineq(self, z):
        return self.Aineq @ z - self.bineq

    def ineq_jacobian(self, z):
        return self.Aineq

    def constraint_hessian(self, z, nu, mu):
        return sp.csr_matrix((self.dim, self.dim))


class SmoothSubsystem(SubsystemProblem):
    """Subsystem assembled from plain callables (dense or sparse returns).

    Missing constraint callables mean the constraint block is empty.
    ``eq_hess(z, nu)`` / ``ineq_hess(z, mu)`` are optional and only used by
    exact-Hessian SQP.
    """

    def __init__(self, dim, f, grad, hess, eq=None, eq_jac=None, ineq=None,
                 ineq_jac=None, eq_hess=None, ineq_hess=None):
        self.dim = int(dim)
        self._f, self._grad, self._hess = f, grad, hess
        self._eq, self._eq_jac = eq, eq_jac
        self._ineq, self._ineq_jac = ineq, ineq_jac
        self._eq_hess, self._ineq_hess = eq_hess, ineq_hess
        z0 = np.zeros(self.dim)
        self.n_eq = 0 if eq is None else np.atleast_1d(eq(z0)).size
        self.n_ineq = 0 if ineq is None else np.atleast_1d(ineq(z0)).size

    def objective(self, z):
        return float(self._f(z))

    def gradient(self, z):
        return np.atleast_1d(np.asarray(self._grad(z), dtype=float))

    def hessian(self, z):
        return sp.csr_matrix(np.atleast_2d(self._hess(z)))

    def eq(self, z):
        return np.zeros(0) if self._eq is None else np.atleast_1d(np.asarray(self._eq(z), dtype=float))

    def eq_jacobian(self, z):
        if self._eq_jac is None:
            return sp.csr_matrix((0, self.dim))
        return sp.csr_matrix(np.atleast_2d(self._eq_jac(z)))

    def ineq(self, z):
        return np.zeros(0) if self._ineq is None else np.atleast_1d(np.asarray(self._ineq(z), dtype=float))

    def ineq_jacobian(self, z):
        if self._ineq_jac is None:
            return sp.csr_matrix((0, self.dim))
        return sp.csr_matrix(np.atleast_2d(self._ineq_jac(z)))

    def constraint_hessian(self, z, nu, mu):
        out = sp.csr_matrix((self.dim, self.dim))
        if self.n_eq:
            if self._eq_hess is None:
                raise NotImplementedError("eq_hess not given")
            out = out + sp.csr_matrix(np.atleast_2d(self._eq_hess(z, nu)))
        if self.n_ineq:
            if self._ineq_hess is None:
                raise NotImplementedError("ineq_hess not given")
            out = out + sp.csr_matrix(np.atleast_2d(self._ineq_hess(z, mu)))
        return out


@dataclass(frozen=True)
class ConsensusCoupling:
    """Copy/original pairs and the consensus groups they induce.

    Each row of ``E`` is ``e_copy - e_original``. Groups are the connected
    components of the pair graph; the projection onto ``{z | E z = 0}`` is
    the arithmetic mean over each group.
    """

    pairs: tuple
    dims: tuple
    offsets: np.ndarray
    copy_index: np.ndarray      # flat index of each pair's copy
    original_index: np.ndarray  # flat index of each pair's original
    member_index: np.ndarray    # flat indices of all coupled entries
    member_group: np.ndarray    # group id per entry of member_index
    group_size: np.ndarray
    groups: tuple = field(repr=False)

    @property
    def n_z(self):
        return int(sum(self.dims))

    @property
    def n_c(self):
        return len(self.pairs)

    def flat(self, address):
        i, k = address
        return int(self.offsets[i] + k)

    def average(self, z):
        z = _check_vec(z, self.n_z, "z")
        out = z.copy()
        if self.member_index.size:
            sums = np.bincount(self.member_group, weights=z[self.member_index],
                               minlength=self.group_size.size)
            means = sums / self.group_size
            out[self.member_index] = means[self.member_group]
        return out

    def residual(self, z):
        """``E z`` as one entry per pair."""
        z = np.asarray(z)
        return z[self.copy_index] - z[self.original_index]

    def matrix(self):
        """Explicit ``E`` (sparse); for checks and the stacked oracle."""
        m = self.n_c
        rows = np.repeat(np.arange(m), 2)
        cols = np.column_stack([self.copy_index, self.original_index]).ravel()
        vals = np.tile([1.0, -1.0], m)
        return sp.csr_matrix((vals, (rows, cols)), shape=(m, self.n_z))

    def stack(self, parts):
        return stack(parts, self.dims)

    def split(self, z):
        return split(z, self.dims)


def stack(parts, dims=None):
    if dims is not None and len(parts) != len(dims):
        raise DimensionError("wrong number of subsystem blocks")
    if not len(parts):
        return np.zeros(0)
    return np.concatenate([np.asarray(p, dtype=float).ravel() for p in parts])


def split(z, dims):
    z = np.asarray(z, dtype=float)
    if z.size != sum(dims):
        raise DimensionError(f"stacked vector has {z.size} entries, expected {sum(dims)}")
    return [a.copy() for a in np.split(z, np.cumsum(dims)[:-1])] if len(dims) else []


def build_coupling(pairs, dims) -> ConsensusCoupling:
    """Build the consensus structure from ``(copy, original)`` address pairs.

    Parameters
    ----------
    pairs : sequence of ((i, k), (j, m))
        ``z_i[k]`` is a copy of ``z_j[m]``.
    dims : sequence of int
        Subsystem decision-vector sizes.

    Raises
    ------
    CouplingError
        On dangling addresses, a repeated copy, or cyclic copy chains
        (any of which would make ``E`` rank deficient).
    """
    dims = tuple(int(d) for d in dims)
    if any(d <= 0 for d in dims):
        raise CouplingError("subsystem dimensions must be positive")
    offsets = np.concatenate([[0], np.cumsum(dims)[:-1]]).astype(int) if dims else np.zeros(0, int)

    def flat(addr):
        try:
            i, k = addr
        except (TypeError, ValueError):
            raise CouplingError(f"malformed address {addr!r}") from None
        if not (0 <= i < len(dims)) or not (0 <= k < dims[i]):
            raise CouplingError(f"dangling address {addr!r}")
        return int(offsets[i] + k)

    pairs = tuple((tuple(c), tuple(o)) for c, o in pairs)
    copies = np.array([flat(c) for c, _ in pairs], dtype=int)
    originals = np.array([flat(o) for _, o in pairs], dtype=int)
    if copies.size != np.unique(copies).size:
        raise CouplingError("copy address repeated; E would lose full row rank")
    if np.any(copies == originals):
        raise CouplingError("variable paired with itself")

    # union-find over the pair graph
    parent = {}

    def find(a):
        parent.setdefault(a, a)
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for c, o in zip(copies, originals):
        rc, ro = find(int(c)), find(int(o))
        if rc == ro:
            raise CouplingError("cyclic copy chain; E would lose full row rank")
        parent[rc] = ro

    members = sorted(parent)
    roots = {}
    group_lists = []
    member_group = np.empty(len(members), dtype=int)
    for pos, m in enumerate(members):
        r = find(m)
        if r not in roots:
            roots[r] = len(group_lists)
            group_lists.append([])
        member_group[pos] = roots[r]
        group_lists[roots[r]].append(m)
    # originals first in each group, for readability of the group listing
    copy_set = set(copies.tolist())
    groups = tuple(tuple(sorted(g, key=lambda a: (a in copy_set, a))) for g in group_lists)

    return ConsensusCoupling(
        pairs=pairs,
        dims=dims,
        offsets=offsets,
        copy_index=copies,
        original_index=originals,
        member_index=np.array(members, dtype=int),
        member_group=member_group,
        group_size=np.array([len(g) for g in group_lists], dtype=float),
        groups=groups,
    )


def average(coupling: ConsensusCoupling, z):
    """Orthogonal projection of stacked ``z`` onto the consensus set."""
    return coupling.average(z)


def check_dual_condition(coupling: ConsensusCoupling, gamma, tol=1e-10) -> bool:
    """Whether ``gamma`` lies in the range of ``E'`` (i.e. ``M_avg gamma = 0``)."""
    gamma = _check_vec(gamma, coupling.n_z, "gamma")
    uncoupled = np.ones(coupling.n_z, dtype=bool)
    uncoupled[coupling.member_index] = False
    if np.any(gamma[uncoupled] != 0.0):
        return False
    if not coupling.member_index.size:
        return True
    avg = coupling.average(gamma)
    return bool(np.max(np.abs(avg[coupling.member_index])) <= tol)


@dataclass
class PartialNLP:
    """``min sum f_i(z_i)`` s.t. ``g_i = 0``, ``h_i <= 0``, ``sum E_i z_i = 0``.

    ``input_index`` optionally lists, per subsystem, where the first
    predicted input lives inside ``z_i``; ``input_box`` are its bounds.
    Both are used by the real-time controller to extract ``u[0]``.
    """

    subsystems: list
    coupling: ConsensusCoupling
    input_index: list | None = None
    input_box: tuple | None = None

    def __post_init__(self):
        dims = tuple(s.dim for s in self.subsystems)
        if dims != self.coupling.dims:
            raise DimensionError(f"subsystem dims {dims} do not match coupling dims {self.coupling.dims}")

    @property
    def dims(self):
        return self.coupling.dims

    @property
    def n_z(self):
        return self.coupling.n_z

    def stack(self, parts):
        return stack(parts, self.dims)

    def split(self, z):
        return split(z, self.dims)

    def objective(self, z_parts):
        return float(sum(s.objective(z) for s, z in zip(self.subsystems, z_parts)))

    def first_inputs(self, z_parts):
        if self.input_index is None:
            raise ValueError("problem does not declare input locations")
        u = np.concatenate([np.asarray(z)[idx] for z, idx in zip(z_parts, self.input_index)])
        if self.input_box is not None:
            u = np.clip(u, *self.input_box)
        return u


@dataclass
class IterateState:
    """Per-subsystem primal/dual iterate of the decentralized solvers."""

    z: list
    z_bar: list
    gamma: list
    nu: list | None = None
    mu: list | None = None

    @classmethod
    def zeros(cls, nlp_or_dims):
        dims = nlp_or_dims.dims if hasattr(nlp_or_dims, "dims") else tuple(nlp_or_dims)
        zs = [np.zeros(d) for d in dims]
        return cls(z=[a.copy() for a in zs], z_bar=[a.copy() for a in zs],
                   gamma=[a.copy() for a in zs])

    def copy(self):
        cp = lambda xs: None if xs is None else [np.array(x, dtype=float, copy=True) for x in xs]
        return IterateState(cp(self.z), cp(self.z_bar), cp(self.gamma), cp(self.nu), cp(self.mu))


__all__ = [
    "ConsensusCoupling", "CouplingError", "DimensionError", "IterateState",
    "PartialNLP", "QuadraticSubsystem", "SmoothSubsystem", "SubsystemProblem",
    "average", "build_coupling", "check_dual_condition", "split", "stack",
]
