from .config import Mode, SimConfig, desk_config, paper_scale_config
from .engine import ExperimentResult, SimulationError, run_experiment

__all__ = [
    "Mode",
    "SimConfig",
    "desk_config",
    "paper_scale_config",
    "ExperimentResult",
    "SimulationError",
    "run_experiment",
]
