"""Dual implicit KV-cache memory navigation: tensors, memories, encoders,
policy, simulator, training, and benchmarks."""

__version__ = "0.1.0"

from .config import RunConfig
from .memory import DualMemory, FrameKV
from .model import NavModel, rollout
from .policy import Action, Instruction, select_action

__all__ = ["RunConfig", "DualMemory", "FrameKV", "NavModel", "rollout", "Action",
           "Instruction", "select_action", "__version__"]
