"""Stationary refinement with a learnable fractal step size and quantile-calibrated halting."""

from .dynamics import Model, ModelKind, OperatorSet, ScaleParameters, Trajectory, frost_step, lambda_value, readout, unroll
from .errors import ConfigError, EmptySketchError, FrostError, NumericError, ShapeError
from .halting import HaltingHead, HaltingPolicy, adaptive_predict, adaptive_unroll, calibrate_threshold, first_crossing
from .sketch import KLLSketch
from .training import TrainingConfig, train

__all__ = [
    "ConfigError",
    "EmptySketchError",
    "FrostError",
    "HaltingHead",
    "HaltingPolicy",
    "KLLSketch",
    "Model",
    "ModelKind",
    "NumericError",
    "OperatorSet",
    "ScaleParameters",
    "ShapeError",
    "TrainingConfig",
    "Trajectory",
    "adaptive_predict",
    "adaptive_unroll",
    "calibrate_threshold",
    "first_crossing",
    "frost_step",
    "lambda_value",
    "readout",
    "train",
    "unroll",
]
