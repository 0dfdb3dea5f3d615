"""Training-free subject personalization by token replacement in a toy diffusion transformer."""

from .dit import DiTConfig, ToyDiT, dit_forward, image_to_tokens, patchify, tokens_to_image, unpatchify
from .errors import (
    ConfigError,
    DimensionError,
    DisjointnessError,
    DivergenceError,
    OutOfBoundsError,
    ParameterError,
)
from .estimators import FlowDiT, SubjectPersonalizer
from .flow import FlowSchedule, GaussianMixtureOracle, Trajectory, invert, sample
from .grid import dilate, erode, replace_tokens, shuffle_windows, translate_mask, translate_tokens
from .personalize import (
    Perturbation,
    PersonalizeRequest,
    ReferenceBundle,
    compose_layout,
    edit,
    personalize,
    prepare_reference,
)
from .rope import assign_positions, matched_position_score, mm_attention, rope_rotate
from .training import DatasetConfig, OptimizerConfig, TrainState, flow_matching_loss, train

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DatasetConfig",
    "DiTConfig",
    "DimensionError",
    "DisjointnessError",
    "DivergenceError",
    "FlowDiT",
    "FlowSchedule",
    "GaussianMixtureOracle",
    "OptimizerConfig",
    "OutOfBoundsError",
    "ParameterError",
    "SubjectPersonalizer",
    "PersonalizeRequest",
    "Perturbation",
    "ReferenceBundle",
    "ToyDiT",
    "TrainState",
    "Trajectory",
    "assign_positions",
    "compose_layout",
    "dilate",
    "dit_forward",
    "edit",
    "erode",
    "flow_matching_loss",
    "image_to_tokens",
    "invert",
    "matched_position_score",
    "mm_attention",
    "patchify",
    "personalize",
    "prepare_reference",
    "replace_tokens",
    "rope_rotate",
    "sample",
    "shuffle_windows",
    "tokens_to_image",
    "train",
    "translate_mask",
    "translate_tokens",
    "unpatchify",
]
