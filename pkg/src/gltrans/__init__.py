"""Global-local transformer for object re-identification, on a numpy autodiff core."""

from .backbone import BackboneConfig, ConfigError, TokenBundle, ViTBackbone, patchify
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import RunConfig, load_config
from .data import Dataset, DatasetError, SynthSpec, generate, load_dir, write_dataset
from .estimator import GLTransReID
from .evaluation import EvalReport, distance_matrix, evaluate, l2_normalize
from .heads import HeadConfig
from .model import ForwardOutput, GLTransNet
from .objectives import BatchSpec, LossReport, PKSampler, cross_entropy, total_loss, triplet_loss
from .tensor import NonFiniteError, ShapeError, Tensor, no_grad

__version__ = "0.1.0"

__all__ = [
    "BackboneConfig",
    "BatchSpec",
    "CheckpointError",
    "ConfigError",
    "Dataset",
    "DatasetError",
    "EvalReport",
    "ForwardOutput",
    "GLTransNet",
    "GLTransReID",
    "HeadConfig",
    "LossReport",
    "NonFiniteError",
    "PKSampler",
    "RunConfig",
    "ShapeError",
    "SynthSpec",
    "Tensor",
    "TokenBundle",
    "ViTBackbone",
    "cross_entropy",
    "distance_matrix",
    "evaluate",
    "generate",
    "l2_normalize",
    "load_checkpoint",
    "load_config",
    "load_dir",
    "no_grad",
    "patchify",
    "save_checkpoint",
    "total_loss",
    "triplet_loss",
    "write_dataset",
]
