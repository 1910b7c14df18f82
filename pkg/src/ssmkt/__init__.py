"""Selective state-space knowledge tracing on a small numpy autodiff core."""
from .data import InteractionSequence, Vocabulary, load_interactions, split, window
from .interpret import exercise_weights, materialize_alpha, sequence_weights
from .metrics import acc, auc
from .model import AttentionKT, Mamba4KT, ModelConfig, build_model
from .ssm import S6, S6Config, discretize, scan_parallel, scan_sequential
from .synth import synth_mastery
from .tensor import Tensor, backward, no_grad, recording
from .train import TrainConfig, evaluate, load_run, train

__version__ = "0.1.0"

__all__ = [
    "AttentionKT", "InteractionSequence", "Mamba4KT", "ModelConfig", "S6", "S6Config", "Tensor",
    "TrainConfig", "Vocabulary", "acc", "auc", "backward", "build_model", "discretize", "evaluate",
    "exercise_weights", "load_interactions", "load_run", "materialize_alpha", "no_grad", "recording",
    "scan_parallel", "scan_sequential", "sequence_weights", "split", "synth_mastery", "train", "window",
]
