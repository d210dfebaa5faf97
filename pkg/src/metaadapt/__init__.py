"""Few-shot domain adaptation by similarity-rescaled second-order meta-learning."""

from .algorithm import MetaConfig, run_metaadapt
from .autodiff import CompGraph, ParameterVector
from .data import Dataset, Example, SplitSpec, SynthConfig
from .model import ModelSpec
from .pipeline import RunConfig, run_experiment

__all__ = [
    "CompGraph",
    "Dataset",
    "Example",
    "MetaConfig",
    "ModelSpec",
    "ParameterVector",
    "RunConfig",
    "SplitSpec",
    "SynthConfig",
    "run_experiment",
    "run_metaadapt",
]
