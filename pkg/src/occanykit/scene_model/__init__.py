from .blocks import zero_output_projections
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .model import (
    FrameOutput,
    HeadOutputs,
    ModelConfig,
    ModelError,
    ReconstructionOutput,
    SceneMemory,
    SceneModel,
    TaskTokens,
    TokenGrid,
    grid_positions,
)

__all__ = [
    "CheckpointError",
    "FrameOutput",
    "HeadOutputs",
    "ModelConfig",
    "ModelError",
    "ReconstructionOutput",
    "SceneMemory",
    "SceneModel",
    "TaskTokens",
    "TokenGrid",
    "grid_positions",
    "load_checkpoint",
    "save_checkpoint",
    "zero_output_projections",
]
