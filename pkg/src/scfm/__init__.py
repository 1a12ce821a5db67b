"""Structured-coupling flow matching: a learnable GMM-prior latent source
jointly trained with a flow-matching transport, on a small autodiff core."""

from .config import TrainConfig, config_load
from .model import ScfmModel, build_model
from .objectives import LossBreakdown, scfm_train_step, train
from .sampler import SampleTrace, SolverSpec, integrate, reconstruct, sample_decoder, sample_full, sample_refined

__all__ = [
    "LossBreakdown",
    "SampleTrace",
    "ScfmModel",
    "SolverSpec",
    "TrainConfig",
    "build_model",
    "config_load",
    "integrate",
    "reconstruct",
    "sample_decoder",
    "sample_full",
    "sample_refined",
    "scfm_train_step",
    "train",
]
