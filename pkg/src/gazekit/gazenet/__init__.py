from .checkpoint import Checkpoint, from_network, load, save, to_network
from .config import GazeNetConfig, parameter_count, within_budget
from .model import GazeNet
from .preprocess import EyeInputs, preprocess, preprocess_records
from .training import FeatureRow, TrainResult, evaluate_network, extract_features, train

__all__ = [
    "Checkpoint", "EyeInputs", "FeatureRow", "GazeNet", "GazeNetConfig", "TrainResult",
    "evaluate_network", "extract_features", "from_network", "load", "parameter_count",
    "preprocess", "preprocess_records", "save", "to_network", "train", "within_budget",
]
