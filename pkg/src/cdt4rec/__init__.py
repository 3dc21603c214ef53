"""Three-stream causal decision transformer for offline sequential recommendation."""

from .config import ModelConfig
from .data import Dataset, Trajectory, compute_rtg, load_dataset, save_dataset
from .env import EnvSpec, OraclePolicy, RandomPolicy, RecEnv, evaluate_policy
from .evaluation import ModelPolicy, rank_metrics
from .model import CDT4Rec
from .training import TrainConfig, TrainState, load_checkpoint, save_checkpoint, train

__all__ = [
    "CDT4Rec", "ModelConfig", "TrainConfig", "TrainState", "Dataset", "Trajectory",
    "compute_rtg", "load_dataset", "save_dataset", "EnvSpec", "RecEnv", "OraclePolicy",
    "RandomPolicy", "evaluate_policy", "ModelPolicy", "rank_metrics", "train",
    "load_checkpoint", "save_checkpoint",
]
