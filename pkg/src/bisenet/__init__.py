"""Two-branch real-time semantic segmentation in pure numpy.

Build, cost-analyse, train (at toy scale) and run the detail/semantic
network with bilateral guided aggregation and booster heads.
"""
from .analysis import CostReport, count_costs, reproduce_tables
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, load_config, parse_config
from .errors import CheckpointMismatch, ConfigError, NumericError, StateError
from .model import (ArchConfig, BiSeNetV2, attach_boosters, build_bisenetv2, count_params,
                    forward_inference)
from .tensor import Tensor, backward, no_grad
from .train import TrainConfig, synth_dataset, train_loop

__version__ = "0.1.0"

__all__ = ["ArchConfig", "BiSeNetV2", "CheckpointMismatch", "ConfigError", "CostReport",
           "NumericError", "RunConfig", "StateError", "Tensor", "TrainConfig",
           "attach_boosters", "backward", "build_bisenetv2", "count_costs", "count_params",
           "forward_inference", "load_checkpoint", "load_config", "no_grad", "parse_config",
           "reproduce_tables", "save_checkpoint", "synth_dataset", "train_loop"]
