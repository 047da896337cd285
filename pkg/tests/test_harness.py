import json

import numpy as np
import pytest

from dmpc.grid import ConfigError, ScenarioConfig
from dmpc.harness import (CLOSED_LOOP_FIELDS, OPEN_LOOP_FIELDS, OpenLoopResult, closed_loop_cost, compare,
                          emit_results, parse_range, read_results, relative_performance, run_closed_loop,
                          run_open_loop)


def small(**kw):
    base = dict(case=1, grid_side=1, horizon=5, t_final_s=1.0, seed=2)
    base.update(kw)
    return ScenarioConfig(**base)


@pytest.fixture(scope="module")
def rollout():
    return run_closed_loop(small(), "dsqp", k_max=1, l_max=5, j_star=False)


def test_relative_performance():
    assert relative_performance(1.0, 1.0) == 1.0
    assert relative_performance(0.5, 1.0) == 0.5
    assert relative_performance(0.0, 0.0) == 1.0
    with pytest.raises(ValueError):
        relative_performance(1.0, 0.0)
    with pytest.raises(ValueError):
        relative_performance(-1.0, 2.0)


def test_cost_by_hand():
    omega = np.array([[1.0, 0.0], [0.0, 2.0]])
    p = np.array([[1.0, 1.0], [0.0, 0.0]])
    # (0.1 / 2) * [(1 + 0.1 * 2) + 4] / 1
    assert closed_loop_cost(omega, p, 0.1, 1.0) == pytest.approx(0.05 * 5.2, rel=1e-15)


def test_zero_load_equilibrium_costs_nothing():
    cfg = small(freq_bound_mHz=0.0, load_step_pu=0.0)
    res = run_closed_loop(cfg, "dsqp", l_max=3, j_star=False)
    assert res.J == 0.0
    assert relative_performance(0.0, res.J) == 1.0


def test_rollout_shapes_and_bounds(rollout):
    steps = 10
    assert rollout.omega.shape == (steps + 1, 9)
    assert len(rollout.inner_iterations) == steps + 1
    assert all(i == 5 for i in rollout.inner_iterations)
    assert np.abs(rollout.p).max() <= 0.3
    assert not any(rollout.degraded)


def test_rollout_is_deterministic(rollout):
    again = run_closed_loop(small(), "dsqp", k_max=1, l_max=5, j_star=False)
    assert again.J == rollout.J and np.array_equal(again.omega, rollout.omega)


def test_oracle_is_its_own_reference():
    res = run_closed_loop(small(t_final_s=0.3), "oracle")
    assert res.ratio == 1.0 and res.J_star == res.J


def test_csv_roundtrip_recovers_cost(rollout, tmp_path):
    rollout.J_star, rollout.ratio = rollout.J, 1.0
    path = emit_results(rollout, tmp_path / "cl.csv")
    rows = read_results(path)
    assert list(rows[0]) == CLOSED_LOOP_FIELDS
    summary = [r for r in rows if r["step"] == "summary"]
    assert len(summary) == 1
    body = [r for r in rows if r["step"] != "summary"]
    steps = max(r["step"] for r in body) + 1
    om = np.zeros((steps, 9))
    p = np.zeros((steps, 9))
    for r in body:
        om[r["step"], r["bus"]] = r["omega_rad_s"]
        p[r["step"], r["bus"]] = r["p_pu"]
    J = closed_loop_cost(om, p, 0.1, 1.0)
    assert abs(J - rollout.J) <= 1e-10
    assert summary[0]["J"] == rollout.J


def test_json_output(rollout, tmp_path):
    path = emit_results(rollout, tmp_path / "cl.json", "json")
    body = json.loads(path.read_text())
    assert body["fields"] == CLOSED_LOOP_FIELDS
    assert len(body["rows"]) == 11 * 9
    assert body["summary"]["J"] == rollout.J


def test_empty_open_loop_output_is_header_only(tmp_path):
    path = emit_results([], tmp_path / "ol.csv")
    assert path.read_text().strip() == ",".join(OPEN_LOOP_FIELDS)


def test_open_loop_single_subsystem():
    res = run_open_loop(small(dynamics="linear"), "admm", repeats=2, tol=1e-3)
    assert isinstance(res, OpenLoopResult)
    assert res.status == "ok" and res.subsystems == 1
    assert res.kkt_residual <= 1e-3
    assert res.time_min_s <= res.time_med_s <= res.time_max_s


def test_open_loop_centralized_and_dsqp():
    c = run_open_loop(small(grid_side=2), "centralized", repeats=1, tol=1e-8)
    d = run_open_loop(small(grid_side=2), "dsqp", repeats=1, tol=1e-3)
    assert c.status == "ok" and c.kkt_residual <= 1e-8
    assert d.status == "ok" and d.kkt_residual <= 1e-3


def test_open_loop_config_errors():
    with pytest.raises(ConfigError):
        run_open_loop(small(dynamics="nonlinear"), "admm")
    with pytest.raises(ConfigError):
        run_open_loop(small(dynamics="linear"), "dsqp")
    with pytest.raises(ConfigError):
        run_open_loop(small(dynamics="linear"), "admm", repeats=0)


def test_open_loop_budget_exhaustion_recorded():
    res = run_open_loop(small(dynamics="linear", grid_side=2), "admm", repeats=1, tol=1e-12, l_max=3)
    assert res.status == "not-converged" and res.iterations == 3 and res.kkt_residual > 1e-12


def test_parse_range():
    assert parse_range("1..4") == [1, 2, 3, 4]
    assert parse_range("2,5") == [2, 5]
    for bad in ("4..1", "a..b", "x"):
        with pytest.raises(ConfigError):
            parse_range(bad)


def test_compare_budget_accounting():
    rows = compare(small(t_final_s=0.3), [0, 2])
    assert [r["l_max"] for r in rows] == [0, 2]
    assert all(r["J_star"] == rows[0]["J_star"] for r in rows)
    assert all(0 < r["ratio"] <= 1.0 + 1e-6 for r in rows)


def test_unknown_closed_loop_solver():
    with pytest.raises(ConfigError):
        run_closed_loop(small(), "ipopt")
