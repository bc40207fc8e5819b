"""Deterministic simulation of PBFT and score-grouped SG-PBFT consensus."""

from .config import ScenarioConfig, load_config
from .core_types import ClientRequest, Kind, KeyTable, ProtocolMessage
from .metrics_bench import ProtocolKind, aggregate, formula_messages
from .pbft_engine import ConfigError
from .simnet import RunReport, Simulation, run_scenario

__all__ = [
    "ClientRequest",
    "ConfigError",
    "Kind",
    "KeyTable",
    "ProtocolKind",
    "ProtocolMessage",
    "RunReport",
    "ScenarioConfig",
    "Simulation",
    "aggregate",
    "formula_messages",
    "load_config",
    "run_scenario",
]
