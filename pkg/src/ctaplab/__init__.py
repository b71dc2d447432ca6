"""ctaplab: a workbench for coherent-transport pulse design on quantum-dot
chains.

The package simulates open-system dynamics of 3- and 5-dot chains under
tunable tunneling pulses, provides analytic Gaussian baseline schedules,
trains stochastic policies with a trust-region policy-gradient optimizer,
and estimates which state variables the learned controller actually relies
on via a two-layer dependency-network analysis.
"""

__version__ = "1.0.0"

from .errors import (ArgumentError, ConfigError, NumericalError,
                     NumericalInstabilityError, ProtocolError)
from .linalg import Rng, conjugate_gradient
from .quantum import MasterEquationModel, Trajectory, evolve
from .pulses import (OMEGA_MAX, PulseSchedule, gaussian_ctap_pair,
                     gaussian_sctap, moving_average, spline_resample)
from .env import (CtapEnv, ScenarioConfig, load_scenario_config,
                  parse_scenario_config)
from .agent import (GaussianPolicy, TrpoConfig, ValueFunction, evaluate,
                    evaluate_schedule, load_checkpoint, load_trpo_config,
                    save_checkpoint, train)
from .analysis import (DependencyGraph, TransitionDataset, build_2tbn,
                       collect_transitions, export_dot, feature_importance,
                       load_dataset)

__all__ = [
    "ArgumentError", "ConfigError", "NumericalError",
    "NumericalInstabilityError", "ProtocolError",
    "Rng", "conjugate_gradient",
    "MasterEquationModel", "Trajectory", "evolve",
    "OMEGA_MAX", "PulseSchedule", "gaussian_ctap_pair", "gaussian_sctap",
    "moving_average", "spline_resample",
    "CtapEnv", "ScenarioConfig", "load_scenario_config",
    "parse_scenario_config",
    "GaussianPolicy", "TrpoConfig", "ValueFunction", "evaluate",
    "evaluate_schedule", "load_checkpoint", "load_trpo_config",
    "save_checkpoint", "train",
    "DependencyGraph", "TransitionDataset", "build_2tbn",
    "collect_transitions", "export_dot", "feature_importance",
    "load_dataset",
    "__version__",
]
