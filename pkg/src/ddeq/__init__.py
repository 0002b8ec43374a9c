"""Distributional deep equilibrium models on discrete measures."""

from .errors import DDEQError
from .kernel import RIESZ, KernelSpec, mmd_sq
from .measure import DiscreteMeasure, Sample, normalize, pad_batch, synth_dataset
from .net import ModelConfig, ModelParams, ddeq_core_forward, init_params
from .solver import FlowConfig, FlowTrace, fixed_target_flow, solve

__version__ = "0.1.0"

__all__ = [
    "DDEQError",
    "DiscreteMeasure",
    "FlowConfig",
    "FlowTrace",
    "KernelSpec",
    "ModelConfig",
    "ModelParams",
    "RIESZ",
    "Sample",
    "ddeq_core_forward",
    "fixed_target_flow",
    "init_params",
    "mmd_sq",
    "normalize",
    "pad_batch",
    "solve",
    "synth_dataset",
]
