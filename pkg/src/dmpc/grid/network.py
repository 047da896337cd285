"""Meshed benchmark power networks.

Buses sit on a square grid with 4-neighbor tie lines. The grid is tiled
by ``grid_side x grid_side`` square subsystems of ``block x block`` buses.
Buses are numbered subsystem-major: bus ``s * nb + k`` is local bus ``k``
(row-major inside the block) of subsystem ``s`` (row-major on the
subsystem grid).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np

M_NOMINAL = 0.167   # pu s^2
D_NOMINAL = 0.045   # pu s
LINE_WEIGHT = 0.2   # pu

GENERATOR = "generator"
LOAD = "load"


class NetworkError(ValueError):
    pass


@dataclass(frozen=True)
class BusParams:
    inertia: float
    damping: float
    kind: str
    coupling: dict  # neighbor bus -> a_nm (pu)


@dataclass(frozen=True)
class SubsystemInfo:
    index: int
    buses: np.ndarray            # global ids, ascending
    generators: np.ndarray       # global ids
    loads: np.ndarray            # global ids
    boundary: np.ndarray         # M_i^in: coupled buses of other subsystems, ascending
    in_neighbors: tuple          # N_i^in
    internal_edges: np.ndarray   # edge ids with both ends inside
    cross_edges: np.ndarray      # edge ids with exactly one end inside
    owned_cross_edges: np.ndarray  # subset of cross_edges whose angle bound lives here


@dataclass
class PlantState:
    """Bus angles (rad), angular velocities (rad/s) and loads (pu)."""

    theta: np.ndarray
    omega: np.ndarray
    w: np.ndarray

    def copy(self):
        return PlantState(self.theta.copy(), self.omega.copy(), self.w.copy())

    @property
    def frequency(self):
        """Frequency deviation in Hz."""
        return self.omega / (2 * np.pi)


@dataclass
class GridModel:
    grid_side: int
    block: int
    inertia: np.ndarray
    damping: np.ndarray
    is_generator: np.ndarray
    edges: np.ndarray    # (E, 2), n < m
    weights: np.ndarray  # (E,)
    name: str = ""

    def __post_init__(self):
        self.inertia = np.asarray(self.inertia, dtype=float)
        self.damping = np.asarray(self.damping, dtype=float)
        self.is_generator = np.asarray(self.is_generator, dtype=bool)
        self.edges = np.asarray(self.edges, dtype=int).reshape(-1, 2)
        self.weights = np.asarray(self.weights, dtype=float)
        if np.any(self.inertia <= 0) or np.any(self.damping <= 0):
            raise NetworkError("inertia and damping must be positive")
        if np.any(self.weights < 0):
            raise NetworkError("coupling weights must be nonnegative")

    @property
    def n_bus(self):
        return self.inertia.size

    @property
    def buses_per_subsystem(self):
        return self.block * self.block

    @property
    def n_subsystems(self):
        return self.grid_side * self.grid_side

    @cached_property
    def subsystem_of(self):
        return np.arange(self.n_bus) // self.buses_per_subsystem

    @cached_property
    def coords(self):
        nb, b = self.buses_per_subsystem, self.block
        ids = np.arange(self.n_bus)
        s, k = ids // nb, ids % nb
        return np.column_stack([(s // self.grid_side) * b + k // b, (s % self.grid_side) * b + k % b])

    def bus(self, n) -> BusParams:
        nbrs = {}
        for (a, b), w in zip(self.edges, self.weights):
            if a == n:
                nbrs[int(b)] = float(w)
            elif b == n:
                nbrs[int(a)] = float(w)
        return BusParams(float(self.inertia[n]), float(self.damping[n]),
                         GENERATOR if self.is_generator[n] else LOAD, nbrs)

    @cached_property
    def subsystems(self):
        nb = self.buses_per_subsystem
        sub = self.subsystem_of
        ea, eb = sub[self.edges[:, 0]], sub[self.edges[:, 1]]
        out = []
        for i in range(self.n_subsystems):
            buses = np.arange(i * nb, (i + 1) * nb)
            internal = np.flatnonzero((ea == i) & (eb == i))
            cross = np.flatnonzero((ea == i) ^ (eb == i))
            other = np.where(ea[cross] == i, self.edges[cross, 1], self.edges[cross, 0])
            owned = cross[np.minimum(ea[cross], eb[cross]) == i]
            out.append(SubsystemInfo(
                index=i,
                buses=buses,
                generators=buses[self.is_generator[buses]],
                loads=buses[~self.is_generator[buses]],
                boundary=np.unique(other),
                in_neighbors=tuple(int(j) for j in np.unique(sub[other])),
                internal_edges=internal,
                cross_edges=cross,
                owned_cross_edges=owned,
            ))
        return out

    # -- serialization ------------------------------------------------------
    def to_dict(self):
        return {
            "name": self.name,
            "grid_side": self.grid_side,
            "block": self.block,
            "inertia": self.inertia.tolist(),
            "damping": self.damping.tolist(),
            "kind": [GENERATOR if g else LOAD for g in self.is_generator],
            "edges": self.edges.tolist(),
            "weights": self.weights.tolist(),
            "partition": self.subsystem_of.tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(grid_side=int(d["grid_side"]), block=int(d["block"]),
                   inertia=d["inertia"], damping=d["damping"],
                   is_generator=[k == GENERATOR for k in d["kind"]],
                   edges=d["edges"], weights=d["weights"], name=d.get("name", ""))

    def save(self, path, state: PlantState | None = None):
        d = self.to_dict()
        if state is not None:
            d["initial_state"] = {"theta": state.theta.tolist(), "omega": state.omega.tolist(),
                                  "w": state.w.tolist()}
        with open(path, "w") as fh:
            json.dump(d, fh, indent=1)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            d = json.load(fh)
        model = cls.from_dict(d)
        st = d.get("initial_state")
        state = None if st is None else PlantState(*(np.asarray(st[k], dtype=float) for k in ("theta", "omega", "w")))
        return model, state


def mesh_edges(grid_side, block):
    """4-neighbor edges of the full bus grid, in subsystem-major numbering."""
    side = grid_side * block
    nb = block * block

    def bus_id(r, c):
        s = (r // block) * grid_side + c // block
        return s * nb + (r % block) * block + c % block

    edges = []
    for r in range(side):
        for c in range(side):
            if c + 1 < side:
                edges.append(sorted((bus_id(r, c), bus_id(r, c + 1))))
            if r + 1 < side:
                edges.append(sorted((bus_id(r, c), bus_id(r + 1, c))))
    return np.array(sorted(map(tuple, edges)), dtype=int).reshape(-1, 2)


def generate_network(cfg):
    """Sample a benchmark network and its initial plant state.

    Parameters of subsystem 1 (inertia, damping, generator/load placement
    and initial frequency) are drawn at random and copied to every other
    subsystem. Loads then draw ``w_n ~ U[-load_step, 0]`` independently.

    Parameters
    ----------
    cfg : ScenarioConfig

    Returns
    -------
    model : GridModel
    state : PlantState
    """
    p = cfg.resolved()
    nb, n_loads = p["buses_per_subsystem"], p["loads_per_subsystem"]
    block = math.isqrt(nb)
    if block * block != nb or nb < 1:
        raise NetworkError(f"buses per subsystem must be a perfect square, got {nb}")
    if p["generator_subsystems"] is None and not (0 <= n_loads < nb):
        raise NetworkError("loads per subsystem must be fewer than buses per subsystem")
    S = p["grid_side"] ** 2
    rng = np.random.default_rng(p["seed"])

    M1 = rng.uniform(0.9, 1.1, nb) * M_NOMINAL
    D1 = rng.uniform(0.9, 1.1, nb) * D_NOMINAL
    f0 = rng.uniform(-1.0, 1.0, nb) * p["freq_bound_mHz"] * 1e-3
    gen1 = np.ones(nb, dtype=bool)
    gen1[rng.choice(nb, size=n_loads, replace=False)] = False

    if p["generator_subsystems"] is None:
        is_gen = np.tile(gen1, S)
    else:
        is_gen = np.repeat(np.isin(np.arange(S), p["generator_subsystems"]), nb)

    edges = mesh_edges(p["grid_side"], block)
    model = GridModel(grid_side=p["grid_side"], block=block, inertia=np.tile(M1, S),
                      damping=np.tile(D1, S), is_generator=is_gen, edges=edges,
                      weights=np.full(len(edges), LINE_WEIGHT), name=p["name"])
    n = model.n_bus
    w = np.zeros(n)
    w[~is_gen] = -rng.uniform(0.0, 1.0, int((~is_gen).sum())) * p["load_step_pu"]
    state = PlantState(theta=np.zeros(n), omega=2 * np.pi * np.tile(f0, S), w=w)
    return model, state
