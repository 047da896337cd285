from .dynamics import SubsystemDynamics, discretize_step, plant_step, swing_rhs
from .network import GridModel, NetworkError, PlantState, generate_network
from .ocp import GridOCP, GridSubsystem, build_ocp
from .scenario import CASES, PRESETS, ConfigError, ScenarioConfig, load_config

__all__ = ["CASES", "PRESETS", "ConfigError", "GridModel", "GridOCP", "GridSubsystem", "NetworkError",
           "PlantState", "ScenarioConfig", "SubsystemDynamics", "build_ocp", "discretize_step",
           "generate_network", "load_config", "plant_step", "swing_rhs"]
