"""From-scratch attention-augmented Xception: autodiff core, model, training."""

from .config import ConfigError, ModelConfig, load_model_config, parse_model_config
from .data import Dataset, SynthSpec, load_dataset, synth_dataset, write_dataset_png
from .model import Model, build_model, param_count, shape_trace
from .tensor import Rng, ShapeError, Tensor, backward
from .train import TrainConfig, evaluate, roc_auc, train
from .weights import load_weights, save_weights

__all__ = [
    "ConfigError", "ModelConfig", "load_model_config", "parse_model_config",
    "Dataset", "SynthSpec", "load_dataset", "synth_dataset", "write_dataset_png",
    "Model", "build_model", "param_count", "shape_trace",
    "Rng", "ShapeError", "Tensor", "backward",
    "TrainConfig", "evaluate", "roc_auc", "train",
    "load_weights", "save_weights",
]
