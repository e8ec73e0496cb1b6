"""Desk-scale laboratory for inverting small conditional diffusion and flow models."""

__version__ = "0.1.0"

from .dataset import Condition, GmmSpec, default_gmm_spec, make_condition
from .diffusion import NoiseSchedule, cfg_combine, linear_beta_schedule
from .errors import CheckpointError, ConfigError, InvlabError, ObjectiveError
from .flow import FlowGrid, cfm_pair
from .inversion import (InversionResult, NoiseMapSet, ddim_invert, edit_by_condition_swap,
                        editfriendly_invert, renoise_invert, tighten)
from .network import ModelParams, TrainConfig, load_checkpoint, save_checkpoint, train_model
from .numerics import RngStream, sample_standard_normal, standard_normal_nll

__all__ = [
    "__version__",
    "Condition", "GmmSpec", "default_gmm_spec", "make_condition",
    "NoiseSchedule", "cfg_combine", "linear_beta_schedule",
    "CheckpointError", "ConfigError", "InvlabError", "ObjectiveError",
    "FlowGrid", "cfm_pair",
    "InversionResult", "NoiseMapSet", "ddim_invert", "edit_by_condition_swap",
    "editfriendly_invert", "renoise_invert", "tighten",
    "ModelParams", "TrainConfig", "load_checkpoint", "save_checkpoint", "train_model",
    "RngStream", "sample_standard_normal", "standard_normal_nll",
]
