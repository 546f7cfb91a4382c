"""Entry-flipped transformer for inferring and predicting participant behavior, in numpy."""

from .data import ClipBatch, ClipRecord, Manifest, SynthSpec, generate, load_clips, to_batch, write_clips
from .metrics import MetricsReport, evaluate_trajectories, fad, mad, macro_f1
from .model import EFTransformer, ModelConfig
from .rollout import Spike, rollout
from .tensor import Tensor, grad_check, no_grad
from .training import TrainConfig, load_model, save_model, train

__version__ = "0.1.0"

__all__ = ["ClipBatch", "ClipRecord", "Manifest", "SynthSpec", "generate", "load_clips", "to_batch",
           "write_clips", "MetricsReport", "evaluate_trajectories", "fad", "mad", "macro_f1",
           "EFTransformer", "ModelConfig", "Spike", "rollout", "Tensor", "grad_check", "no_grad",
           "TrainConfig", "load_model", "save_model", "train"]
