"""refbox: visual grounding of referring expressions by direct box
regression, built from scratch on a numpy autodiff core.

An expression is soft-parsed into a few phrase tokens, an image into a
grid of visual tokens; a two-stream encoder advances both under
text-guided self-attention, a decoder reads out target-relevant visual
evidence through the textual tokens, and a small head regresses the
normalized box.  Everything trains end to end on a built-in synthetic
shapes task.
"""

from .tensor import Tensor, Parameter, Tape, backward
from .model import GroundingModel, ModelConfig
from .heads import BoundingBox, LossWeights, accuracy_at_05, giou, iou, total_loss
from .training import TrainConfig, evaluate, lr_at, train
from .data import SceneConfig, generate_dataset, load_dataset
from .text import Vocabulary, tokenize

__version__ = "0.1.0"

__all__ = [
    "Tensor", "Parameter", "Tape", "backward",
    "GroundingModel", "ModelConfig",
    "BoundingBox", "LossWeights", "accuracy_at_05", "giou", "iou", "total_loss",
    "TrainConfig", "evaluate", "lr_at", "train",
    "SceneConfig", "generate_dataset", "load_dataset",
    "Vocabulary", "tokenize",
    "__version__",
]
