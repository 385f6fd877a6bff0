"""GP-augmented model predictive contouring control for autonomous overtaking."""

from .dynamics import NominalModel, ProcessNoise, TireParamsLinear, TireParamsMagic, VehicleParams
from .gp import GPDictionary, GPModel, Hyperparams, default_hyperparams
from .mpc import MPCConfig, solve
from .sim import Scenario, run_episode, two_phase_experiment

__version__ = "0.1.0"
