"""Frequency-control OCP as a partially separable NLP.

Subsystem ``i`` owns ``z_i = (x_i[0..N], u_i[0..N-1], v_i[0..N])`` where
``x`` interleaves ``(theta, omega)`` per bus, ``u`` are generator
injections and ``v`` are copies of the boundary angles of neighboring
buses. Sizes, with ``nb = |N_i|``, ``ng = |G_i|``, ``nc = |M_i^in|``::

    n_z = (N+1) (2 nb + nc) + N ng
    n_g = (N+1) 2 nb                             initial condition + dynamics
    n_h = 2 (N+1) (nb + e_int + e_own) + 2 N ng  omega, angle and input bounds
    pairs = (N+1) nc                             consensus pairs of subsystem i

``e_int`` counts tie lines inside the subsystem and ``e_own`` the
boundary lines whose angle bound this subsystem carries (each boundary
line is bounded once, by the lower-indexed of its two subsystems).
"""

from __future__ import annotations

import copy

import numpy as np
import scipy.sparse as sp

from ..problem import PartialNLP, SubsystemProblem, build_coupling
from .dynamics import SubsystemDynamics
from .network import GridModel, PlantState

OMEGA_MAX = 1.6 * np.pi
ANGLE_MAX = np.pi / 2
P_MAX = 0.3


class Layout:
    """Index bookkeeping inside one ``z_i``."""

    def __init__(self, nx, ng, nc, N):
        self.nx, self.ng, self.nc, self.N = nx, ng, nc, N
        self.ox = 0
        self.ou = (N + 1) * nx
        self.ov = self.ou + N * ng
        self.dim = self.ov + (N + 1) * nc

    def x(self, tau):
        return self.ox + tau * self.nx + np.arange(self.nx)

    def theta(self, tau, k):
        return self.ox + tau * self.nx + 2 * k

    def omega(self, tau, k):
        return self.ox + tau * self.nx + 2 * k + 1

    def u(self, tau):
        return self.ou + tau * self.ng + np.arange(self.ng)

    def v(self, tau, c):
        return self.ov + tau * self.nc + c

    def unpack(self, z):
        N = self.N
        X = z[self.ox:self.ou].reshape(N + 1, self.nx)
        U = z[self.ou:self.ov].reshape(N, self.ng)
        V = z[self.ov:].reshape(N + 1, self.nc)
        return X, U, V

    def pack(self, X, U, V):
        return np.concatenate([np.ravel(X), np.ravel(U), np.ravel(V)])


class GridSubsystem(SubsystemProblem):
    """Evaluators of one subsystem's OCP block."""

    def __init__(self, dyn: SubsystemDynamics, N, delta, weights, x0=None, loads=None,
                 omega_max=OMEGA_MAX, angle_max=ANGLE_MAX, p_max=P_MAX):
        self.dyn = dyn
        self.N, self.delta = int(N), float(delta)
        self.layout = lay = Layout(dyn.nx, dyn.ng, dyn.nc, self.N)
        self.dim = lay.dim
        self.n_eq = (self.N + 1) * dyn.nx
        self.weights = weights
        self._H = sp.diags(weights, format="csr")
        self.x0 = np.zeros(dyn.nx)
        self.d = np.zeros((self.N, dyn.nl))
        self._build_ineq(omega_max, angle_max, p_max)
        self._build_eq_pattern()
        self.set_data(x0, loads)

    def set_data(self, x0=None, loads=None):
        if x0 is not None:
            x0 = np.asarray(x0, dtype=float)
            if x0.shape != (self.dyn.nx,):
                raise ValueError("initial state has wrong size")
            self.x0 = x0
        if loads is not None:
            d = np.asarray(loads, dtype=float)
            if d.ndim == 1:
                d = np.broadcast_to(d, (self.N, d.size))
            if d.shape != (self.N, self.dyn.nl):
                raise ValueError(f"load forecast shape {d.shape}, expected ({self.N}, {self.dyn.nl})")
            self.d = np.array(d)
        return self

    def with_data(self, x0=None, loads=None):
        new = copy.copy(self)
        return new.set_data(x0, loads)

    # -- objective ---------------------------------------------------------
    def objective(self, z):
        return 0.5 * float(np.dot(self.weights * z, z))

    def gradient(self, z):
        return self.weights * z

    def hessian(self, z):
        return self._H

    # -- equality constraints ---------------------------------------------
    def _build_eq_pattern(self):
        dyn, lay, N = self.dyn, self.layout, self.N
        nx, ng, nc = dyn.nx, dyn.ng, dyn.nc
        # structural pattern from a generic point of the nonlinear map
        rng = np.random.default_rng(12345)
        probe = SubsystemDynamics.__new__(SubsystemDynamics)
        probe.__dict__.update(dyn.__dict__)
        probe._s, probe._ds = np.sin, np.cos
        _, Fx, Fu, Fv = probe.step_jacobian(rng.normal(size=nx) * 0.3, rng.normal(size=ng),
                                            rng.normal(size=nc) * 0.3, np.zeros(dyn.nl), self.delta)
        self._mx, self._mu, self._mv = Fx != 0, Fu != 0, Fv != 0
        rx, cx = np.nonzero(self._mx)
        ru, cu = np.nonzero(self._mu)
        rv, cv = np.nonzero(self._mv)
        taus = np.arange(N)[:, None]
        rows = [np.arange((N + 1) * nx)]
        cols = [np.arange((N + 1) * nx)]
        rows += [((taus + 1) * nx + rx).ravel(), ((taus + 1) * nx + ru).ravel(), ((taus + 1) * nx + rv).ravel()]
        cols += [(lay.ox + taus * nx + cx).ravel(), (lay.ou + taus * ng + cu).ravel(),
                 (lay.ov + taus * nc + cv).ravel()]
        rows, cols = np.concatenate(rows), np.concatenate(cols)
        order = sp.csr_matrix((np.arange(1, rows.size + 1, dtype=float), (rows, cols)),
                              shape=(self.n_eq, self.dim))
        order.sort_indices()
        self._eq_perm = order.data.astype(int) - 1
        self._eq_indices = order.indices.copy()
        self._eq_indptr = order.indptr.copy()

    def _unpack(self, z):
        return self.layout.unpack(np.asarray(z, dtype=float))

    def eq(self, z):
        X, U, V = self._unpack(z)
        F = self.dyn.step(X[:-1], U, V[:-1], self.d, self.delta)
        return np.concatenate([X[0] - self.x0, (X[1:] - F).ravel()])

    def eq_jacobian(self, z):
        X, U, V = self._unpack(z)
        _, Fx, Fu, Fv = self.dyn.step_jacobian(X[:-1], U, V[:-1], self.d, self.delta)
        vals = np.concatenate([np.ones(self.n_eq), -Fx[:, self._mx].ravel(),
                               -Fu[:, self._mu].ravel(), -Fv[:, self._mv].ravel()])
        return sp.csr_matrix((vals[self._eq_perm], self._eq_indices, self._eq_indptr),
                             shape=(self.n_eq, self.dim))

    def predict(self, x0, U, V):
        """Roll the prediction model forward from ``x0`` (copies given)."""
        X = [np.asarray(x0, dtype=float)]
        for tau in range(self.N):
            X.append(self.dyn.step(X[-1], U[tau], V[tau], self.d[tau], self.delta))
        return np.array(X)

    # -- inequality constraints -------------------------------------------
    def _build_ineq(self, omega_max, angle_max, p_max):
        dyn, lay, N = self.dyn, self.layout, self.N
        rows, cols, vals, b = [], [], [], []
        r = 0

        def add(entries, bound):
            nonlocal r
            for sign in (1.0, -1.0):
                for c, v in entries:
                    rows.append(r)
                    cols.append(c)
                    vals.append(sign * v)
                b.append(bound)
                r += 1

        for tau in range(N + 1):
            for k in range(dyn.nb):
                add([(lay.omega(tau, k), 1.0)], omega_max)
        for tau in range(N + 1):
            for a, bb in zip(dyn.int_a, dyn.int_b):
                add([(lay.theta(tau, a), 1.0), (lay.theta(tau, bb), -1.0)], angle_max)
        owned = np.isin(dyn.cross_edge_ids, dyn.info.owned_cross_edges)
        self.n_owned_cross = int(owned.sum())
        for tau in range(N + 1):
            for k, c in zip(dyn.cross_bus[owned], dyn.cross_slot[owned]):
                add([(lay.theta(tau, k), 1.0), (lay.v(tau, c), -1.0)], angle_max)
        for tau in range(N):
            for g in range(dyn.ng):
                add([(lay.u(tau)[g], 1.0)], p_max)
        self.bineq = np.array(b, dtype=float)
        self.G = sp.csr_matrix((vals, (rows, cols)), shape=(r, self.dim))
        self.n_ineq = r

    def ineq(self, z):
        return self.G @ z - self.bineq

    def ineq_jacobian(self, z):
        return self.G


class GridOCP:
    """OCP structure for a network; :meth:`problem` instantiates it at ``x(t)``.

    Parameters
    ----------
    model : GridModel
    horizon : int
    delta : float
        Sampling interval (s).
    mode : {"nonlinear", "linear"}
    q_theta, q_omega, r_input : float
        Stage weights ``Q = diag(q_theta, q_omega)``, ``R``; the terminal
        weight equals ``Q``.
    reg : float
        Weight ``c`` of the regularization ``c |z_i|^2 / 2``.
    """

    def __init__(self, model: GridModel, horizon=100, delta=0.1, mode="nonlinear",
                 q_theta=0.0, q_omega=1.0, r_input=0.1, reg=1e-4):
        self.model = model
        self.N = int(horizon)
        self.delta = float(delta)
        self.mode = mode
        self.r_input = r_input
        self.q = (q_theta, q_omega)
        self.reg = reg
        self.dyns = [SubsystemDynamics(model, i, mode) for i in range(model.n_subsystems)]
        self.subsystems = [GridSubsystem(d, self.N, self.delta, self._weights(d)) for d in self.dyns]
        self.layouts = [s.layout for s in self.subsystems]
        self.coupling = build_coupling(self.copy_pairs(), [s.dim for s in self.subsystems])

    def _weights(self, dyn):
        lay = Layout(dyn.nx, dyn.ng, dyn.nc, self.N)
        W = np.zeros(lay.dim)
        X = W[lay.ox:lay.ou].reshape(self.N + 1, dyn.nx)
        X[:, 0::2] = self.q[0]
        X[:, 1::2] = self.q[1]
        W[lay.ou:lay.ov] = self.r_input
        return W + self.reg

    def copy_pairs(self):
        model = self.model
        nb = model.buses_per_subsystem
        pairs = []
        for i, dyn in enumerate(self.dyns):
            lay_i = Layout(dyn.nx, dyn.ng, dyn.nc, self.N)
            for c, m in enumerate(dyn.info.boundary):
                j = int(model.subsystem_of[m])
                km = int(m) - j * nb
                lay_j = Layout(self.dyns[j].nx, self.dyns[j].ng, self.dyns[j].nc, self.N)
                for tau in range(self.N + 1):
                    pairs.append(((i, lay_i.v(tau, c)), (j, lay_j.theta(tau, km))))
        return pairs

    @property
    def n_z(self):
        return self.coupling.n_z

    def problem(self, state: PlantState, loads=None) -> PartialNLP:
        """OCP instance with initial condition ``x(t)`` and a load forecast.

        ``loads`` defaults to holding the measured ``state.w`` over the
        horizon; otherwise an ``(n_bus,)`` or ``(N, n_bus)`` array.
        """
        w = state.w if loads is None else np.asarray(loads, dtype=float)
        if w.shape[-1] != self.model.n_bus or w.ndim > 2 or (w.ndim == 2 and w.shape[0] != self.N):
            raise ValueError(f"load forecast shape {w.shape} inconsistent with horizon {self.N}"
                             f" and {self.model.n_bus} buses")
        subs = [s.with_data(d.local_state(state), w[..., d.info.loads])
                for s, d in zip(self.subsystems, self.dyns)]
        return PartialNLP(subs, self.coupling,
                          input_index=[lay.u(0) for lay in self.layouts],
                          input_box=(-P_MAX, P_MAX))

    def bus_injection(self, u):
        """Scatter stacked first inputs into a per-bus injection vector."""
        p = np.zeros(self.model.n_bus)
        gens = np.concatenate([d.info.generators for d in self.dyns]) if self.dyns else np.zeros(0, int)
        p[gens] = u
        return p

    def counts(self):
        return [dict(n_z=s.dim, n_g=s.n_eq, n_h=s.n_ineq, pairs=(self.N + 1) * s.dyn.nc)
                for s in self.subsystems]


def build_ocp(model: GridModel, x_t: PlantState, load_forecast=None, horizon=100, delta=0.1,
              mode="nonlinear", **cost) -> PartialNLP:
    """Build the OCP at the measured state ``x_t`` (see :class:`GridOCP`)."""
    return GridOCP(model, horizon, delta, mode, **cost).problem(x_t, load_forecast)
