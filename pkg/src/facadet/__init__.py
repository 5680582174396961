"""Desk-scale façade-attachment detector built on a small NumPy autodiff engine."""

from .model import ABLATIONS, ModelConfig, ablation_config, build_model, erf_map
from .structures import CLASS_NAMES, Annotation, Detection, Sample
from .tensor import Tape, Tensor, backward, no_grad, use_tape
from .train import TrainConfig, detection_loss, fit, train_epoch

__all__ = [
    "ABLATIONS", "CLASS_NAMES", "Annotation", "Detection", "ModelConfig", "Sample", "Tape", "Tensor",
    "TrainConfig", "ablation_config", "backward", "build_model", "detection_loss", "erf_map", "fit",
    "no_grad", "train_epoch", "use_tape",
]

__version__ = "0.1.0"
