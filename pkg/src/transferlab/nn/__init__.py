"""Minimal numpy neural-network engine (float64 compute, float32 checkpoints)."""
from .checkpoint import CheckpointError, load_model, save_model
from .layers import Conv2d, Dense, Dropout, Flatten, Layer, MaxPool2x2, ReLU, ShapeError, parse_layer
from .network import (
    PRESET_NAMES,
    Gradients,
    LabelError,
    Network,
    build_architecture,
    log_softmax,
    preset_layers,
    softmax,
)
from .train import SGD, History, OptimizerConfig, evaluate, fit, round_to_float32

__all__ = [
    "CheckpointError", "load_model", "save_model",
    "Conv2d", "Dense", "Dropout", "Flatten", "Layer", "MaxPool2x2", "ReLU", "ShapeError", "parse_layer",
    "PRESET_NAMES", "Gradients", "LabelError", "Network", "build_architecture", "log_softmax",
    "preset_layers", "softmax",
    "SGD", "History", "OptimizerConfig", "evaluate", "fit", "round_to_float32",
]
