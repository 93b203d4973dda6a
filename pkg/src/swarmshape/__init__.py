"""Deterministic multi-robot shape-formation simulator.

Relative localization from range + odometry, finite-time agreement on the
shape anchor, and a behavior-based formation controller, with a CLI for
running scenarios and rendering traces.
"""
from .config import ConfigError, ScenarioConfig, parse_config, serialize_config
from .core import InteractionGraph, Mode, NoiseModel, RobotState, split_rng
from .engine import RunResult, Simulation, make_simulation, run_scenario
from .relloc import MeasurementBatch, PairSample, RelPosEstimator
from .shapefield import ShapeField, build_field, load_shape

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "ScenarioConfig", "parse_config", "serialize_config",
    "InteractionGraph", "Mode", "NoiseModel", "RobotState", "split_rng",
    "RunResult", "Simulation", "make_simulation", "run_scenario",
    "MeasurementBatch", "PairSample", "RelPosEstimator",
    "ShapeField", "build_field", "load_shape",
]
