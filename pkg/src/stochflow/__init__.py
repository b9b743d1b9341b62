"""Stable stochastic dynamical systems learned from demonstrations with normalizing flows."""

from .data import Dataset, Trajectory, load, save, synth_limit_cycle, synth_point_to_point
from .flows import FlowStack
from .latent import LimitCycleSDE, LinearSDE
from .metrics import MetricReport, discrete_frechet, dtw, swept_area
from .model import ImitationModel, Normalizer, build_model, classify, load_model, save_model
from .trainer import LossReport, TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "Dataset",
    "FlowStack",
    "ImitationModel",
    "LimitCycleSDE",
    "LinearSDE",
    "LossReport",
    "MetricReport",
    "Normalizer",
    "TrainConfig",
    "Trajectory",
    "build_model",
    "classify",
    "discrete_frechet",
    "dtw",
    "load",
    "load_model",
    "save",
    "save_model",
    "swept_area",
    "synth_limit_cycle",
    "synth_point_to_point",
    "train",
]
