"""Safe online learning for nonlinear control.

Episodic posterior-sampling model learning combined with a stochastic
barrier-certificate safety filter and a sampling-based planner, plus Monte
Carlo verification of the safety guarantees.
"""

__version__ = "0.1.0"

from .domain import (ENV_NAMES, METHOD_NAMES, METHODS_ALL, EpisodeTrace,
                     ExperimentConfig, apply_overrides, load_config,
                     parse_config_text, seeded_rng)
from .envs import default_config, make_env
from .learner import (METHODS, RunRecord, reference_costs, regret_curve,
                      run_method, slope_stat, write_outputs)
from .model import ResidualModel, beta_radius, fit_initial_model
from .planner import MppiPlanner
from .verify import run_all as run_all_verifiers

__all__ = [
    "ENV_NAMES", "METHOD_NAMES", "METHODS_ALL", "METHODS",
    "EpisodeTrace", "ExperimentConfig", "MppiPlanner", "ResidualModel",
    "RunRecord", "apply_overrides", "beta_radius", "default_config",
    "fit_initial_model", "load_config", "make_env", "parse_config_text",
    "reference_costs", "regret_curve", "run_all_verifiers", "run_method",
    "seeded_rng", "slope_stat", "write_outputs", "__version__",
]
