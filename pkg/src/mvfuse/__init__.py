"""Multi-view feature fusion into a small LoRA-adapted language model, in numpy."""

from .fusion import AGPConfig, AttentiveGatedProjector, MLPConfig, MLPProjector
from .lm import LMConfig, LoRAConfig, ToyLM
from .model import ModelConfig, VisionLanguageModel
from .tensor import Tensor

__all__ = [
    "AGPConfig",
    "AttentiveGatedProjector",
    "LMConfig",
    "LoRAConfig",
    "MLPConfig",
    "MLPProjector",
    "ModelConfig",
    "Tensor",
    "ToyLM",
    "VisionLanguageModel",
]
__version__ = "0.1.0"
