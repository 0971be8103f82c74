"""
spectra: a numpy hybrid CNN/transformer classifier for hyperspectral scenes.

The package carries its own small reverse-mode autodiff (:mod:`spectra.tensor`),
the dual-branch network (:mod:`spectra.model`), scene I/O and sampling
(:mod:`spectra.data`), training, evaluation and a command line.
"""

from .data import GroundTruth, HsiCube, load_cube, stratified_split, synth_scene
from .evaluation import MetricsReport, confusion, evaluate, metrics
from .model import CMTNet, ModelConfig, ModelOutput, combined_loss, predict
from .tensor import Tensor, backward, no_grad
from .training import TrainConfig, TrainLog, train

__version__ = "0.1.0"

__all__ = [
    "CMTNet",
    "GroundTruth",
    "HsiCube",
    "MetricsReport",
    "ModelConfig",
    "ModelOutput",
    "Tensor",
    "TrainConfig",
    "TrainLog",
    "backward",
    "combined_loss",
    "confusion",
    "evaluate",
    "load_cube",
    "metrics",
    "no_grad",
    "predict",
    "stratified_split",
    "synth_scene",
    "train",
]
