"""IGM-complete value decomposition for cooperative multi-agent Q-learning, at desk scale."""
from .envs import LatentStateMatrixGame, MatrixGame, penalty_game
from .mixers import KINDS, Mixer, MixerSpec
from .training import TrainConfig, run_experiment
from .verification import JointValueTable, igm_check

__all__ = [
    "KINDS",
    "JointValueTable",
    "LatentStateMatrixGame",
    "MatrixGame",
    "Mixer",
    "MixerSpec",
    "TrainConfig",
    "igm_check",
    "penalty_game",
    "run_experiment",
]
__version__ = "0.1.0"
