"""Open-loop scalability studies, closed-loop MPC rollouts and result files."""

from __future__ import annotations

import csv
import json
import logging
import math
import statistics
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .admm import AdmmConfig, SolverError, admm_solve, kkt_residual, make_local_solvers
from .centralized import OracleConfig, centralized_nlp_solve, centralized_qp_solve
from .dsqp import DsqpConfig, RtiState, affine_qp, dsqp_solve, linearize, rti_control_step
from .grid.dynamics import model_plant_step, plant_step
from .grid.network import generate_network
from .grid.ocp import GridOCP
from .grid.scenario import ConfigError, ScenarioConfig
from .problem import IterateState

log = logging.getLogger(__name__)

DEFAULT_RHO = 1.0

OPEN_LOOP_FIELDS = ["case", "subsystems", "n_z", "solver", "iterations", "time_min_s", "time_med_s",
                    "time_max_s", "kkt_residual"]
CLOSED_LOOP_FIELDS = ["step", "time_s", "bus", "theta_rad", "omega_rad_s", "p_pu", "w_pu", "J", "J_star",
                      "ratio"]
COMPARE_FIELDS = ["solver", "k_max", "l_max", "J", "J_star", "ratio"]


@dataclass
class OpenLoopResult:
    case: str
    subsystems: int
    n_z: int
    solver: str
    iterations: int
    time_min_s: float
    time_med_s: float
    time_max_s: float
    kkt_residual: float
    status: str = "ok"
    error: str | None = None

    def row(self):
        return {k: getattr(self, k) for k in OPEN_LOOP_FIELDS}


@dataclass
class ClosedLoopResult:
    network: str
    solver: str
    k_max: int
    l_max: int
    delta: float
    t_final: float
    J: float
    J_star: float | None
    ratio: float | None
    theta: np.ndarray          # (steps + 1, n_bus)
    omega: np.ndarray
    p: np.ndarray
    w: np.ndarray
    solve_times: list = field(default_factory=list)
    inner_iterations: list = field(default_factory=list)
    degraded: list = field(default_factory=list)
    kkt: list = field(default_factory=list)

    @property
    def times(self):
        return self.delta * np.arange(self.theta.shape[0])


def relative_performance(J_star, J):
    """``J_star / J``; defined as 1 when both costs vanish."""
    if J == 0:
        if J_star == 0:
            return 1.0
        raise ValueError("J = 0 with nonzero J_star")
    if J < 0 or J_star < 0:
        raise ValueError("closed-loop costs must be nonnegative")
    return float(J_star) / float(J)


def closed_loop_cost(omega, p, delta, t_final, r_input=0.1, theta=None, q_theta=0.0):
    """Averaged cost ``(1/t_f) sum_t delta sum_n (q_theta theta^2 + omega^2 + R p^2) / 2``."""
    stage = np.sum(np.asarray(omega) ** 2, axis=1) + r_input * np.sum(np.asarray(p) ** 2, axis=1)
    if q_theta and theta is not None:
        stage = stage + q_theta * np.sum(np.asarray(theta) ** 2, axis=1)
    return float(delta * np.sum(0.5 * stage) / t_final)


def _require_dynamics(cfg, solver):
    if solver == "admm" and cfg.dynamics != "linear":
        raise ConfigError("ADMM open-loop runs need linear dynamics")
    if solver == "dsqp" and cfg.dynamics != "nonlinear":
        raise ConfigError("dSQP open-loop runs need nonlinear dynamics")
    if solver not in ("admm", "dsqp", "centralized"):
        raise ConfigError(f"unknown open-loop solver {solver!r}")


def _open_loop_state(cfg):
    """Initial condition with loads switched off (frequency deviation only)."""
    model, state = generate_network(cfg)
    state.w = np.zeros_like(state.w)
    return model, state


def run_open_loop(cfg: ScenarioConfig, solver="admm", repeats=5, tol=None, rho=None, l_max=10000,
                  k_max=50, kkt_check_period=1, threads=None) -> OpenLoopResult:
    """Solve the OCP at the sampled initial condition ``repeats`` times.

    Problem construction, solver setup and one warm-up solve of every
    subsystem QP happen before the clock starts. ``iterations`` counts
    ADMM iterations (summed over outer iterations for dSQP) or, for the
    centralized oracle, its own iterations. Failures are recorded in
    ``status``/``error`` rather than raised.
    """
    _require_dynamics(cfg, solver)
    if repeats < 1:
        raise ConfigError("repeats must be >= 1")
    tol = cfg.kkt_tol if tol is None else tol
    if tol is None:
        raise ConfigError("open-loop runs need a KKT tolerance")
    rho = (cfg.rho or DEFAULT_RHO) if rho is None else rho
    model, state = _open_loop_state(cfg)
    ocp = GridOCP(model, cfg.horizon, cfg.delta_s, cfg.dynamics)
    nlp = ocp.problem(state)
    name = cfg.resolved()["name"]
    times, iters, r, status, err = [], 0, float("nan"), "ok", None

    try:
        for _ in range(repeats):
            if solver == "admm":
                qps = [affine_qp(s) for s in nlp.subsystems]
                solvers = make_local_solvers(qps, rho, threads=threads)
                for s in solvers:
                    s.solve()
                    s.warm_start(np.zeros(s.n), np.zeros(s.meq), np.zeros(s.m - s.meq))
                acfg = AdmmConfig(rho=rho, l_max=l_max, kkt_tol=tol, kkt_check_period=kkt_check_period,
                                  threads=threads)
                t0 = time.perf_counter()
                _, st = admm_solve(qps, nlp.coupling, IterateState.zeros(nlp), acfg, solvers=solvers)
                times.append(time.perf_counter() - t0)
                iters, r = st.iterations_run, st.final_kkt
                if not st.converged:
                    status = "not-converged"
            elif solver == "dsqp":
                q0 = [linearize(s, np.zeros(s.dim)) for s in nlp.subsystems]
                for s in make_local_solvers(q0, rho, threads=threads):
                    s.solve()
                dcfg = DsqpConfig(k_max=k_max, l_max=l_max, rho=rho, kkt_tol=tol, inner_kkt_tol=tol,
                                  kkt_check_period=kkt_check_period, threads=threads)
                t0 = time.perf_counter()
                _, st = dsqp_solve(nlp, RtiState.zeros(nlp), dcfg)
                times.append(time.perf_counter() - t0)
                iters, r = st.total_inner, st.final_kkt
                if not st.converged:
                    status = "not-converged"
            else:
                ocfg = OracleConfig(kkt_tol=min(tol, 1e-8))
                t0 = time.perf_counter()
                res = centralized_qp_solve(nlp, ocfg) if cfg.dynamics == "linear" else \
                    centralized_nlp_solve(nlp, None, ocfg)
                times.append(time.perf_counter() - t0)
                iters, r = res.iterations, res.r
                if res.status != "solved":
                    status = res.status
    except (SolverError, FloatingPointError) as exc:
        status, err = "failed", str(exc)
        log.error("open-loop %s on %s failed: %s", solver, name, exc)
    t = times or [float("nan")]
    return OpenLoopResult(case=name, subsystems=model.n_subsystems, n_z=nlp.n_z, solver=solver,
                          iterations=int(iters), time_min_s=min(t), time_med_s=statistics.median(t),
                          time_max_s=max(t), kkt_residual=float(r), status=status, error=err)


class _OracleController:
    def __init__(self, linear, tol):
        self.linear = linear
        self.cfg = OracleConfig(kkt_tol=tol)
        self.prev = None

    def residual(self, nlp):
        return float("nan") if self.prev is None else self.prev.r

    def __call__(self, nlp):
        if self.linear:
            res = centralized_qp_solve(nlp, self.cfg)
        else:
            res = centralized_nlp_solve(nlp, self.prev, self.cfg)
        if res.status != "solved":
            log.warning("oracle MPC step stopped at r = %.3e", res.r)
        self.prev = res
        return nlp.first_inputs(res.z), {"inner_iterations": res.iterations, "degraded": False}


class _RtiController:
    def __init__(self, nlp0, dcfg: DsqpConfig, linear):
        self.cfg = dcfg
        self.state = RtiState.zeros(nlp0)
        self.solvers = None
        if linear:
            # constant QP matrices: factorize once for the whole rollout
            qps = [linearize(s, np.zeros(s.dim)) for s in nlp0.subsystems]
            self.solvers = make_local_solvers(qps, dcfg.rho, dcfg.qp_settings, dcfg.threads)

    def __call__(self, nlp):
        u, self.state, info = rti_control_step(nlp, self.state, self.cfg, solvers=self.solvers)
        return u, info

    def residual(self, nlp):
        st = self.state
        if st.nu is None:
            return float("nan")
        return kkt_residual(nlp, IterateState(z=st.z, z_bar=st.z, gamma=st.gamma, nu=st.nu, mu=st.mu))


_ORACLE_CACHE: dict = {}


def oracle_cost(cfg: ScenarioConfig, tol=1e-8):
    """Closed-loop cost of the centralized MPC (cached per config)."""
    key = json.dumps({**cfg.to_dict(), "k_max": None, "l_max": None, "rho": None, "tol": tol},
                     sort_keys=True, default=str)
    if key not in _ORACLE_CACHE:
        _ORACLE_CACHE[key] = run_closed_loop(cfg, "oracle", j_star=False, oracle_tol=tol).J
    return _ORACLE_CACHE[key]


def run_closed_loop(cfg: ScenarioConfig, solver="dsqp", k_max=None, l_max=None, j_star=None,
                    rho=None, oracle_tol=1e-8, threads=None, record_kkt=False) -> ClosedLoopResult:
    """Simulate MPC from the scenario's initial condition over ``t_f``.

    At every step ``t = 0..t_n`` the controller sees the exact state and
    loads, the plant integrates the applied input over one interval and
    the stage cost is accumulated. ``solver`` is ``"dsqp"`` (dRTI),
    ``"admm"`` (dRTI on the linear prediction model, one outer iteration)
    or ``"oracle"`` (centralized MPC). ``j_star`` may be given; ``None``
    computes it with an oracle rollout and ``False`` skips it. With
    ``record_kkt`` the KKT residual of each step's OCP at the controller's
    final iterate is stored in ``kkt``.
    """
    if solver not in ("dsqp", "admm", "oracle"):
        raise ConfigError(f"unknown closed-loop solver {solver!r}")
    k_max = cfg.k_max if k_max is None else int(k_max)
    l_max = cfg.l_max if l_max is None else int(l_max)
    if solver == "admm":
        k_max = 1
    rho = (cfg.rho or DEFAULT_RHO) if rho is None else rho
    run_cfg = replace(cfg, dynamics="linear") if solver == "admm" else cfg
    linear = run_cfg.dynamics == "linear"

    model, state = generate_network(cfg)
    ocp = GridOCP(model, cfg.horizon, cfg.delta_s, run_cfg.dynamics)
    steps = cfg.steps
    nlp = ocp.problem(state)
    if solver == "oracle":
        ctrl = _OracleController(linear, oracle_tol)
    else:
        dcfg = DsqpConfig(k_max=k_max, l_max=l_max, rho=rho, threads=threads)
        ctrl = _RtiController(nlp, dcfg, linear)

    n = model.n_bus
    TH, OM, P, W = (np.zeros((steps + 1, n)) for _ in range(4))
    times, inner, degraded, kkt = [], [], [], []
    for t in range(steps + 1):
        if t:
            nlp = ocp.problem(state)
        t0 = time.perf_counter()
        u, info = ctrl(nlp)
        times.append(time.perf_counter() - t0)
        inner.append(int(info.get("inner_iterations", 0)))
        degraded.append(bool(info.get("degraded", False)))
        if record_kkt:
            kkt.append(ctrl.residual(nlp))
        p = ocp.bus_injection(u)
        TH[t], OM[t], P[t], W[t] = state.theta, state.omega, p, state.w
        if t < steps:
            if cfg.plant == "rk4":
                state = plant_step(state, p, cfg.delta_s, model)
            else:
                state = model_plant_step(state, p, cfg.delta_s, model, ocp.dyns)

    J = closed_loop_cost(OM, P, cfg.delta_s, cfg.t_final_s, ocp.r_input, TH, ocp.q[0])
    if j_star is None:
        j_star = J if solver == "oracle" else oracle_cost(cfg, oracle_tol)
    elif j_star is False:
        j_star = None
    ratio = None if j_star is None else relative_performance(j_star, J)
    return ClosedLoopResult(network=cfg.resolved()["name"], solver=solver, k_max=k_max, l_max=l_max,
                            delta=cfg.delta_s, t_final=cfg.t_final_s, J=J, J_star=j_star, ratio=ratio,
                            theta=TH, omega=OM, p=P, w=W, solve_times=times, inner_iterations=inner,
                            degraded=degraded, kkt=kkt)


def parse_range(text):
    """``"1..10"`` -> ``[1, ..., 10]``; also accepts comma lists."""
    text = str(text).strip()
    try:
        if ".." in text:
            a, b = text.split("..", 1)
            a, b = int(a), int(b)
            if b < a:
                raise ValueError
            return list(range(a, b + 1))
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad range {text!r}") from exc


def compare(cfg: ScenarioConfig, lmax_range, solver="dsqp", k_max=1, **kw):
    """``J*/J`` sweep over ``l_max``; one dict per value."""
    J_star = oracle_cost(cfg)
    rows = []
    for l in lmax_range:
        res = run_closed_loop(cfg, solver, k_max=k_max, l_max=l, j_star=J_star, **kw)
        rows.append(dict(solver=solver, k_max=res.k_max, l_max=l, J=res.J, J_star=J_star, ratio=res.ratio))
    return rows


def tune_rho(cfg: ScenarioConfig, solver="admm", grid=(0.1, 0.5, 1.0, 5.0, 10.0, 50.0), **kw):
    """Pick the penalty with the fewest open-loop iterations on ``cfg``."""
    best = None
    for rho in grid:
        res = run_open_loop(cfg, solver, repeats=1, rho=rho, **kw)
        if res.status == "ok" and (best is None or res.iterations < best[1]):
            best = (rho, res.iterations)
    if best is None:
        raise SolverError("no penalty in the grid converged")
    return best[0]


# -- result files ---------------------------------------------------------
def _rows(result):
    """(fields, rows) for any supported result type."""
    if isinstance(result, ClosedLoopResult):
        rows = []
        for t in range(result.theta.shape[0]):
            for n in range(result.theta.shape[1]):
                rows.append(dict(step=t, time_s=t * result.delta, bus=n, theta_rad=result.theta[t, n],
                                 omega_rad_s=result.omega[t, n], p_pu=result.p[t, n], w_pu=result.w[t, n],
                                 J="", J_star="", ratio=""))
        rows.append(dict(step="summary", time_s="", bus="", theta_rad="", omega_rad_s="", p_pu="", w_pu="",
                         J=result.J, J_star="" if result.J_star is None else result.J_star,
                         ratio="" if result.ratio is None else result.ratio))
        return CLOSED_LOOP_FIELDS, rows
    if isinstance(result, OpenLoopResult):
        result = [result]
    result = list(result)
    if not result or isinstance(result[0], OpenLoopResult):
        return OPEN_LOOP_FIELDS, [r.row() for r in result]
    if isinstance(result[0], dict) and "l_max" in result[0]:
        return COMPARE_FIELDS, result
    raise TypeError(f"cannot emit {type(result[0]).__name__}")


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def emit_results(result, path, fmt="csv"):
    """Write a result (or list of open-loop results / compare rows) to ``path``."""
    fields, rows = _rows(result)
    if fmt == "csv":
        with open(path, "w", newline="") as fh:
            wr = csv.DictWriter(fh, fieldnames=fields)
            wr.writeheader()
            for r in rows:
                wr.writerow({k: _fmt(r[k]) for k in fields})
    elif fmt == "json":
        def clean(v):
            v = v.item() if isinstance(v, np.generic) else v
            return None if v == "" or (isinstance(v, float) and math.isnan(v)) else v
        body = {"fields": fields, "rows": [{k: clean(r[k]) for k in fields} for r in rows
                                           if r.get("step") != "summary"]}
        summary = [r for r in rows if r.get("step") == "summary"]
        if summary:
            body["summary"] = {k: clean(summary[0][k]) for k in ("J", "J_star", "ratio")}
        with open(path, "w") as fh:
            json.dump(body, fh, indent=1)
    else:
        raise ValueError(f"unknown format {fmt!r}")
    return path


def read_results(path):
    """Parse a CSV written by :func:`emit_results` back into typed dicts."""
    ints = {"subsystems", "n_z", "iterations", "bus", "k_max", "l_max"}
    floats = {"time_min_s", "time_med_s", "time_max_s", "kkt_residual", "time_s", "theta_rad", "omega_rad_s",
              "p_pu", "w_pu", "J", "J_star", "ratio"}
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            rec = {}
            for k, v in row.items():
                if v == "":
                    rec[k] = None
                elif k in ints or (k == "step" and v != "summary"):
                    rec[k] = int(v)
                elif k in floats:
                    rec[k] = float(v)
                else:
                    rec[k] = v
            out.append(rec)
    return out


__all__ = ["ClosedLoopResult", "OpenLoopResult", "closed_loop_cost", "compare", "emit_results",
           "oracle_cost", "parse_range", "read_results", "relative_performance", "run_closed_loop",
           "run_open_loop", "tune_rho"]
