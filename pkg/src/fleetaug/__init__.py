"""Feature-level GT sampling for semi-supervised 3D detection on fleet payloads."""

from fleetaug.client import FleetClient, FleetClientPool, client_infer
from fleetaug.config.settings import ExperimentConfig, Policy
from fleetaug.server import ExperimentResult, FleetServer, run_all, run_experiment

__version__ = "0.1.0"
__all__ = [
    "ExperimentConfig",
    "ExperimentResult",
    "FleetClient",
    "FleetClientPool",
    "FleetServer",
    "Policy",
    "client_infer",
    "run_all",
    "run_experiment",
    "__version__",
]
