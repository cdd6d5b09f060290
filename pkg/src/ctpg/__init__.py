"""Multi-task SAC with cross-task behavior-policy guidance."""

from .config import Config, ConfigError
from .envs import build_gridskills, build_pointmass
from .trainer import Trainer, control_loss_aggregate, evaluate, make_suite

__all__ = ["Config", "ConfigError", "Trainer", "build_gridskills", "build_pointmass", "control_loss_aggregate",
           "evaluate", "make_suite"]
__version__ = "0.1.0"
