"""Sparse 3-mode tensor imputation with a neural Tucker convolutional network."""

__version__ = "0.1.0"

from .data import ObservationSet, SplitSet, SynthSpec, load_coo, save_coo, split, synthesize
from .ntcn import NtcnConfig, NtcnParams
from .training import EvalReport, TrainConfig, evaluate, load_checkpoint, save_checkpoint, train

__all__ = [
    "EvalReport",
    "NtcnConfig",
    "NtcnParams",
    "ObservationSet",
    "SplitSet",
    "SynthSpec",
    "TrainConfig",
    "evaluate",
    "load_checkpoint",
    "save_checkpoint",
    "load_coo",
    "save_coo",
    "split",
    "synthesize",
    "train",
]
