"""Prompt-augmented multi-agent soft actor-critic for RAN slicing, in numpy."""
from .config import ConfigError, RunConfig, load_config, parse_config
from .env import CellConfig, RewardConfig, SliceSpec, SlicingEnv
from .marl import AgentPool, TrainLoopConfig, run_training
from .sac import SacConfig

__all__ = [
    "AgentPool",
    "CellConfig",
    "ConfigError",
    "RewardConfig",
    "RunConfig",
    "SacConfig",
    "SliceSpec",
    "SlicingEnv",
    "TrainLoopConfig",
    "load_config",
    "parse_config",
    "run_training",
]
__version__ = "0.1.0"
