"""Parameter-efficient adapters for a frozen speech-style transformer, in pure numpy."""

from .adapters import AdapterPlan, TunableModel, assemble
from .backbone import Backbone, BackboneConfig, desk_config, full_scale_config
from .config import ExperimentConfig
from .training import count_parameters, lr_at, train_loop

__all__ = [
    "AdapterPlan",
    "Backbone",
    "BackboneConfig",
    "ExperimentConfig",
    "TunableModel",
    "assemble",
    "count_parameters",
    "desk_config",
    "full_scale_config",
    "lr_at",
    "train_loop",
]

__version__ = "0.1.0"
