"""Swing-equation dynamics, prediction discretization and plant integrator.

Per bus ``n``::

    theta_n' = omega_n
    M_n omega_n' = -D_n omega_n + P_n + p_n + w_n
    P_n = -sum_m a_nm sin(theta_n - theta_m)     (linear mode: no sine)

The prediction model of subsystem ``i`` advances its own states with
Heun's method while neighbor angles (the copies ``v``) stay at their
stage value for both Heun stages, which keeps ``x_i+`` a function of
``(x_i, u_i, v_i, d_i)`` alone.
"""

from __future__ import annotations

import numpy as np

from .network import GridModel, PlantState

MODES = ("nonlinear", "linear")


def _coupling_fn(mode):
    if mode == "nonlinear":
        return np.sin, np.cos
    if mode == "linear":
        return (lambda d: d), np.ones_like
    raise ValueError(f"unknown dynamics mode {mode!r}")


def power_transfer(theta, model: GridModel, mode="nonlinear"):
    """``P_n`` for every bus."""
    s, _ = _coupling_fn(mode)
    a, b = model.edges[:, 0], model.edges[:, 1]
    flow = model.weights * s(theta[..., a] - theta[..., b])
    n = model.n_bus
    P = np.zeros(theta.shape[:-1] + (n,))
    np.add.at(P, (..., a), -flow)
    np.add.at(P, (..., b), flow)
    return P


def swing_rhs(state: PlantState, p, model: GridModel, mode="nonlinear"):
    """Time derivative ``(theta', omega')`` of the full network.

    ``p`` is the per-bus injection (zero at loads).
    """
    P = power_transfer(state.theta, model, mode)
    domega = (-model.damping * state.omega + P + np.asarray(p, dtype=float) + state.w) / model.inertia
    return state.omega.copy(), domega


def _rk4(f, y, h):
    k1 = f(y)
    k2 = f(y + 0.5 * h * k1)
    k3 = f(y + 0.5 * h * k2)
    k4 = f(y + h * k3)
    return y + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)


def plant_step(state: PlantState, p, delta, model: GridModel, w=None, substeps=10, mode="nonlinear"):
    """Advance the plant by ``delta`` with classical RK4 on ``substeps`` substeps.

    Input ``p`` and loads ``w`` (default: ``state.w``) are held constant.
    """
    if delta <= 0:
        raise ValueError("delta must be positive")
    w = state.w if w is None else np.asarray(w, dtype=float)
    p = np.asarray(p, dtype=float)
    n = model.n_bus

    def f(y):
        th, om = y[:n], y[n:]
        rhs = swing_rhs(PlantState(th, om, w), p, model, mode)
        return np.concatenate(rhs)

    y = np.concatenate([state.theta, state.omega])
    h = delta / substeps
    for _ in range(substeps):
        y = _rk4(f, y, h)
    if not np.all(np.isfinite(y)):
        raise FloatingPointError("plant state became non-finite")
    return PlantState(y[:n].copy(), y[n:].copy(), w.copy())


class SubsystemDynamics:
    """Continuous and discretized dynamics of one subsystem.

    Local state is interleaved per bus, ``x = (theta_1, omega_1, theta_2, ...)``;
    ``u`` holds generator injections, ``v`` the boundary copies of
    neighboring angles (ordered as ``SubsystemInfo.boundary``) and ``d``
    the loads of this subsystem. All methods broadcast over leading axes.
    """

    def __init__(self, model: GridModel, index: int, mode="nonlinear"):
        info = model.subsystems[index]
        self.info = info
        self.mode = mode
        self._s, self._ds = _coupling_fn(mode)
        buses = info.buses
        nb = buses.size
        local = {int(b): k for k, b in enumerate(buses)}
        slot = {int(m): c for c, m in enumerate(info.boundary)}
        self.nb, self.nx = nb, 2 * nb
        self.ng, self.nl, self.nc = info.generators.size, info.loads.size, info.boundary.size
        self.M = model.inertia[buses]
        self.D = model.damping[buses]
        self.gen_local = np.array([local[int(g)] for g in info.generators], dtype=int)
        self.load_local = np.array([local[int(g)] for g in info.loads], dtype=int)

        e = model.edges[info.internal_edges]
        self.int_a = np.array([local[int(a)] for a in e[:, 0]], dtype=int)
        self.int_b = np.array([local[int(b)] for b in e[:, 1]], dtype=int)
        self.int_w = model.weights[info.internal_edges]
        self.int_inc = np.zeros((self.int_a.size, nb))
        self.int_inc[np.arange(self.int_a.size), self.int_a] = 1.0
        self.int_inc[np.arange(self.int_a.size), self.int_b] = -1.0

        ce = model.edges[info.cross_edges]
        inside = np.isin(ce[:, 0], buses)
        own = np.where(inside, ce[:, 0], ce[:, 1])
        other = np.where(inside, ce[:, 1], ce[:, 0])
        self.cross_bus = np.array([local[int(b)] for b in own], dtype=int)
        self.cross_slot = np.array([slot[int(m)] for m in other], dtype=int)
        self.cross_w = model.weights[info.cross_edges]
        self.cross_edge_ids = info.cross_edges
        self.cross_sel = np.zeros((self.cross_bus.size, nb))
        self.cross_sel[np.arange(self.cross_bus.size), self.cross_bus] = 1.0
        self.cross_vsel = np.zeros((self.cross_bus.size, self.nc))
        self.cross_vsel[np.arange(self.cross_bus.size), self.cross_slot] = 1.0

        # constant input/load maps into omega rows
        self.B = np.zeros((self.nx, self.ng))
        self.B[2 * self.gen_local + 1, np.arange(self.ng)] = 1.0 / self.M[self.gen_local]
        self.L = np.zeros((self.nx, self.nl))
        self.L[2 * self.load_local + 1, np.arange(self.nl)] = 1.0 / self.M[self.load_local]

    # -- continuous-time part ----------------------------------------------
    def rhs(self, x, u, v, d):
        th, om = x[..., 0::2], x[..., 1::2]
        P = -(self.int_w * self._s(th @ self.int_inc.T)) @ self.int_inc
        dc = th[..., self.cross_bus] - v[..., self.cross_slot]
        P = P - (self.cross_w * self._s(dc)) @ self.cross_sel
        out = np.empty(x.shape)
        out[..., 0::2] = om
        out[..., 1::2] = (-self.D * om + P) / self.M
        return out + u @ self.B.T + d @ self.L.T

    def rhs_jacobian(self, x, v):
        """``(df/dx, df/dv)``; ``df/du`` is the constant ``B``."""
        th = x[..., 0::2]
        lead = x.shape[:-1]
        wi = self.int_w * self._ds(th @ self.int_inc.T)
        lap = np.einsum("ea,...e,eb->...ab", self.int_inc, wi, self.int_inc)
        wc = self.cross_w * self._ds(th[..., self.cross_bus] - v[..., self.cross_slot])
        lap = lap + np.einsum("ea,...e,eb->...ab", self.cross_sel, wc, self.cross_sel)
        A = np.zeros(lead + (self.nx, self.nx))
        k = np.arange(self.nb)
        A[..., 2 * k, 2 * k + 1] = 1.0
        A[..., 2 * k + 1, 2 * k + 1] = -self.D / self.M
        A[..., 1::2, 0::2] = -lap / self.M[:, None]
        C = np.zeros(lead + (self.nx, self.nc))
        C[..., 1::2, :] = np.einsum("ea,...e,ec->...ac", self.cross_sel, wc, self.cross_vsel) / self.M[:, None]
        return A, C

    # -- discretization ----------------------------------------------------
    def step(self, x, u, v, d, delta):
        """Heun step on local terms with neighbor angles held at ``v``."""
        k1 = self.rhs(x, u, v, d)
        k2 = self.rhs(x + delta * k1, u, v, d)
        return x + 0.5 * delta * (k1 + k2)

    def step_jacobian(self, x, u, v, d, delta):
        """``(F, dF/dx, dF/du, dF/dv)`` of :meth:`step` (batched)."""
        k1 = self.rhs(x, u, v, d)
        xt = x + delta * k1
        k2 = self.rhs(xt, u, v, d)
        F = x + 0.5 * delta * (k1 + k2)
        A1, C1 = self.rhs_jacobian(x, v)
        A2, C2 = self.rhs_jacobian(xt, v)
        eye = np.eye(self.nx)
        Fx = eye + 0.5 * delta * (A1 + A2 @ (eye + delta * A1))
        Fu = delta * self.B + 0.5 * delta * delta * (A2 @ self.B)
        Fv = 0.5 * delta * (C1 + C2 + delta * (A2 @ C1))
        return F, Fx, Fu, Fv

    # -- helpers to move between plant and local vectors ------------------
    def local_state(self, state: PlantState):
        x = np.empty(self.nx)
        x[0::2] = state.theta[self.info.buses]
        x[1::2] = state.omega[self.info.buses]
        return x

    def local_loads(self, w):
        return np.asarray(w, dtype=float)[self.info.loads]

    def neighbor_angles(self, theta):
        return np.asarray(theta, dtype=float)[self.info.boundary]


def discretize_step(dyn: SubsystemDynamics, x_i, u_i, x_neighbors, d_i, delta):
    """One prediction step ``x_i+ = f_i^delta(x_i, u_i, x_neighbors, d_i)``."""
    if delta <= 0:
        raise ValueError("delta must be positive")
    return dyn.step(np.asarray(x_i, float), np.asarray(u_i, float),
                    np.asarray(x_neighbors, float), np.asarray(d_i, float), delta)


def model_plant_step(state: PlantState, p, delta, model: GridModel, dyns):
    """Advance the plant with the prediction discretization itself."""
    theta, omega = state.theta.copy(), state.omega.copy()
    for dyn in dyns:
        x = dyn.local_state(state)
        u = np.asarray(p, dtype=float)[dyn.info.generators]
        xn = dyn.step(x, u, dyn.neighbor_angles(state.theta), dyn.local_loads(state.w), delta)
        theta[dyn.info.buses] = xn[0::2]
        omega[dyn.info.buses] = xn[1::2]
    return PlantState(theta, omega, state.w.copy())
