"""Causal transformer toolkit for generating and evaluating synthetic time series."""

__version__ = "0.1.0"

from .datapipe import SeriesRecord, Schema, NormalizerStats
from .model import ModelConfig, count_parameters, init_params, forward
from .training import TrainConfig, train
from .generation import GenerationConfig, generate_dataset, generate_one

__all__ = [
    "SeriesRecord", "Schema", "NormalizerStats", "ModelConfig", "count_parameters",
    "init_params", "forward", "TrainConfig", "train", "GenerationConfig",
    "generate_dataset", "generate_one",
]
