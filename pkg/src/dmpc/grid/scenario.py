"""Scenario configuration and the benchmark presets."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import yaml


class ConfigError(ValueError):
    pass


# case -> (buses per subsystem, loads per subsystem, |f(0)| in mHz)
CASES = {
    1: (9, 2, 32.0),
    2: (16, 4, 32.0),
    3: (25, 5, 32.0),
    4: (9, 4, 32.0),
    5: (9, 6, 32.0),
    6: (9, 2, 48.0),
    7: (9, 2, 64.0),
}

# 81-bus closed-loop networks: nine 3x3 subsystems, start in synchrony
PRESETS = {
    "network_A": dict(buses_per_subsystem=9, loads_per_subsystem=5, freq_bound_mHz=0.0,
                      grid_side=3, generator_subsystems=None, load_step_pu=0.1),
    "network_B": dict(buses_per_subsystem=9, loads_per_subsystem=0, freq_bound_mHz=0.0,
                      grid_side=3, generator_subsystems=(0, 4, 8), load_step_pu=0.1),
}


@dataclass
class ScenarioConfig:
    case: int | str = 1
    grid_side: int | None = None
    seed: int = 0
    delta_s: float = 0.1
    horizon: int = 100
    dynamics: str = "nonlinear"
    load_step_pu: float | None = None
    t_final_s: float = 10.0
    rho: float | None = None
    k_max: int = 1
    l_max: int = 10
    kkt_tol: float | None = 1e-3
    buses_per_subsystem: int | None = None
    loads_per_subsystem: int | None = None
    freq_bound_mHz: float | None = None
    plant: str = "rk4"

    def __post_init__(self):
        if isinstance(self.case, str) and self.case.isdigit():
            self.case = int(self.case)
        if self.case not in CASES and self.case not in PRESETS and self.case != "custom":
            raise ConfigError(f"unknown case {self.case!r}")
        if self.dynamics not in ("nonlinear", "linear"):
            raise ConfigError("dynamics must be 'nonlinear' or 'linear'")
        if self.plant not in ("rk4", "model"):
            raise ConfigError("plant must be 'rk4' or 'model'")
        if not self.delta_s > 0:
            raise ConfigError("delta_s must be positive")
        if int(self.horizon) < 1:
            raise ConfigError("horizon must be >= 1")
        if self.k_max < 1 or self.l_max < 0:
            raise ConfigError("need k_max >= 1 and l_max >= 0")
        if self.t_final_s <= 0:
            raise ConfigError("t_final_s must be positive")
        nb = self.buses_per_subsystem
        if nb is not None and math.isqrt(nb) ** 2 != nb:
            raise ConfigError("buses_per_subsystem must be a perfect square")

    @property
    def steps(self):
        """Number of MPC steps ``t_f / delta``."""
        return int(round(self.t_final_s / self.delta_s))

    def resolved(self):
        """Concrete network parameters after applying case/preset defaults."""
        if self.case in PRESETS:
            base = dict(PRESETS[self.case])
            name = str(self.case)
        elif self.case in CASES:
            nb, nl, fb = CASES[self.case]
            base = dict(buses_per_subsystem=nb, loads_per_subsystem=nl, freq_bound_mHz=fb,
                        grid_side=2, generator_subsystems=None, load_step_pu=0.0)
            name = f"case{self.case}"
        else:
            base = dict(buses_per_subsystem=9, loads_per_subsystem=2, freq_bound_mHz=32.0,
                        grid_side=2, generator_subsystems=None, load_step_pu=0.0)
            name = "custom"
        for key in ("buses_per_subsystem", "loads_per_subsystem", "freq_bound_mHz",
                    "grid_side", "load_step_pu"):
            val = getattr(self, key)
            if val is not None:
                base[key] = val
        if self.case in PRESETS and base["grid_side"] != 3:
            raise ConfigError(f"{self.case} is defined on a 3x3 subsystem grid")
        if base["grid_side"] < 1:
            raise ConfigError("grid_side must be >= 1")
        base["seed"] = self.seed
        base["name"] = name
        return base

    def to_dict(self):
        return asdict(self)


def load_config(path, **overrides) -> ScenarioConfig:
    """Read a YAML/JSON key-value scenario file."""
    try:
        with open(path) as fh:
            data = yaml.safe_load(fh) or {}
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"malformed config {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError("config must be a mapping of keys to values")
    known = {f.name for f in fields(ScenarioConfig)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    data.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return ScenarioConfig(**data)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
