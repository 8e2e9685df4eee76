"""Few-shot keypoint-driven character reposing and animation toolkit."""

from .dataset import (
    CharacterDataset,
    DatasetError,
    KeypointDef,
    KeypointSchema,
    Pose,
    TrainingSample,
    extract_mask,
    load_dataset,
    save_dataset,
)
from .render import ConditioningStack, render_layer, render_stack

__all__ = [
    "CharacterDataset",
    "ConditioningStack",
    "DatasetError",
    "KeypointDef",
    "KeypointSchema",
    "Pose",
    "TrainingSample",
    "extract_mask",
    "load_dataset",
    "save_dataset",
    "render_layer",
    "render_stack",
]

__version__ = "0.1.0"
