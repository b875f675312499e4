"""Lithography simulation, numerical ILT and a weight-tied fixed-point mask optimiser."""

from .estimators import ILILTOptimizer, IltSolver, LithoSimulator
from .ilt import IltConfig, ilt_gradient, ilt_optimize
from .litho import KernelSet, ProcessCondition, RelaxConfig, load_kernels, simulate_intensity, synth_kernels
from .metrics import EpeConfig, epe_violations, pvb_area
from .model import BackboneConfig, InferConfig, LithoContext, UntiedOperator, UpdateOperator, infer, unroll
from .raster import BinaryImage, GrayImage, load_png, save_png
from .trainer import TrainConfig, evaluate, train, trajectory_loss

__version__ = "0.1.0"

__all__ = [
    "BackboneConfig",
    "BinaryImage",
    "EpeConfig",
    "GrayImage",
    "ILILTOptimizer",
    "IltConfig",
    "IltSolver",
    "InferConfig",
    "KernelSet",
    "LithoContext",
    "LithoSimulator",
    "ProcessCondition",
    "RelaxConfig",
    "TrainConfig",
    "UntiedOperator",
    "UpdateOperator",
    "epe_violations",
    "evaluate",
    "ilt_gradient",
    "ilt_optimize",
    "infer",
    "load_kernels",
    "load_png",
    "pvb_area",
    "save_png",
    "simulate_intensity",
    "synth_kernels",
    "train",
    "trajectory_loss",
    "unroll",
]
