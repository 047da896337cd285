"""Decentralized model predictive control via consensus ADMM and bi-level SQP."""

from .admm import AdmmConfig, AdmmStats, SolverError, admm_solve, kkt_residual
from .problem import (ConsensusCoupling, CouplingError, DimensionError, IterateState, PartialNLP,
                      QuadraticSubsystem, SmoothSubsystem, SubsystemProblem, average, build_coupling,
                      check_dual_condition)
from .qp import QPData, QPSettings, QPSolution, QPSolver, solve_qp

__version__ = "0.1.0"
