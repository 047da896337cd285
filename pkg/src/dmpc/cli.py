"""Command-line entry point: ``dmpc {generate,solve-ocp,simulate,compare}``."""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace

from .admm import SolverError
from .grid.network import NetworkError, generate_network
from .grid.scenario import ConfigError, ScenarioConfig, load_config
from .harness import compare, emit_results, parse_range, run_closed_loop, run_open_loop

EXIT_OK, EXIT_SOLVER, EXIT_CONFIG = 0, 1, 2


def _config(args):
    if args.config:
        return load_config(args.config)
    return ScenarioConfig()


def _fmt(path):
    return "json" if str(path).endswith(".json") else "csv"


def cmd_generate(args):
    cfg = _config(args)
    model, state = generate_network(cfg)
    model.save(args.out, state)
    print(f"wrote {model.n_bus}-bus network with {model.n_subsystems} subsystems to {args.out}")
    return EXIT_OK


def cmd_solve_ocp(args):
    cfg = _config(args)
    rows = []
    sides = [cfg.resolved()["grid_side"]] if not args.grid_sides else parse_range(args.grid_sides)
    for side in sides:
        c = replace(cfg, grid_side=side)
        res = run_open_loop(c, args.solver, repeats=args.repeats, tol=args.tol)
        rows.append(res)
        print(f"{res.case} S={res.subsystems} n_z={res.n_z} {res.solver}: {res.iterations} it, "
              f"median {res.time_med_s:.3g} s, r={res.kkt_residual:.2e} [{res.status}]")
    emit_results(rows, args.out, _fmt(args.out))
    return EXIT_SOLVER if any(r.status == "failed" for r in rows) else EXIT_OK


def cmd_simulate(args):
    cfg = _config(args)
    res = run_closed_loop(cfg, args.solver, k_max=args.kmax, l_max=args.lmax,
                          j_star=False if args.no_oracle or args.solver == "oracle" else None)
    if args.solver == "oracle":
        res.J_star, res.ratio = res.J, 1.0
    emit_results(res, args.out, _fmt(args.out))
    ratio = "n/a" if res.ratio is None else f"{res.ratio:.4f}"
    print(f"{res.network} {res.solver} k_max={res.k_max} l_max={res.l_max}: J={res.J:.6g} J*/J={ratio}"
          f" degraded steps={sum(res.degraded)}")
    return EXIT_SOLVER if any(res.degraded) else EXIT_OK


def cmd_compare(args):
    cfg = _config(args)
    rows = compare(cfg, parse_range(args.lmax_range), k_max=args.kmax)
    for r in rows:
        print(f"l_max={r['l_max']}: J*/J={r['ratio']:.4f}")
    emit_results(rows, args.out, _fmt(args.out))
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="dmpc", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="materialize a network model file")
    g.add_argument("--config")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate)

    s = sub.add_parser("solve-ocp", help="open-loop study at the sampled initial condition")
    s.add_argument("--config")
    s.add_argument("--solver", choices=["admm", "dsqp", "centralized"], default="admm")
    s.add_argument("--tol", type=float, default=None)
    s.add_argument("--repeats", type=int, default=5)
    s.add_argument("--grid-sides", default=None, help="e.g. 2..4 for a scalability sweep")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_solve_ocp)

    m = sub.add_parser("simulate", help="closed-loop MPC rollout")
    m.add_argument("--config")
    m.add_argument("--solver", choices=["admm", "dsqp", "oracle"], default="dsqp")
    m.add_argument("--kmax", type=int, default=None)
    m.add_argument("--lmax", type=int, default=None)
    m.add_argument("--no-oracle", action="store_true", help="skip the J* reference rollout")
    m.add_argument("--out", required=True)
    m.set_defaults(func=cmd_simulate)

    c = sub.add_parser("compare", help="J*/J sweep over l_max")
    c.add_argument("--config")
    c.add_argument("--lmax-range", required=True)
    c.add_argument("--kmax", type=int, default=1)
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_compare)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, NetworkError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SolverError, FloatingPointError) as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
