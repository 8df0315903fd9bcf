"""fedsim: trace-driven simulation of federated client selection under dynamic bandwidth."""

from .config import ExperimentConfig, PolicyConfig, load_config
from .engine import RoundRecord, Simulation, run_experiment, time_to_accuracy
from .errors import FedSimError

__version__ = "0.1.0"

__all__ = [
    "ExperimentConfig",
    "FedSimError",
    "PolicyConfig",
    "RoundRecord",
    "Simulation",
    "load_config",
    "run_experiment",
    "time_to_accuracy",
]
