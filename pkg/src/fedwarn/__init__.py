"""Simulated DLT-over-NB-IoT remote patient monitoring with federated epidemic warnings."""

from fedwarn.config import ConfigError, ScenarioConfig, load_config
from fedwarn.harness import RunOutputs, latency_sweep, run_scenario

__all__ = ["ConfigError", "RunOutputs", "ScenarioConfig", "latency_sweep", "load_config", "run_scenario"]
__version__ = "0.1.0"
