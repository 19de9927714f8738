"""Radiance-field inpainting with score distillation, in plain numpy."""

__version__ = "0.1.0"

from .errors import (  # noqa: E402
    CheckpointFormatError,
    ConfigError,
    DatasetError,
    DegenerateNormalError,
    EmptyMaskError,
    InvalidDepthError,
    InvalidInputError,
    InvalidTimestepError,
    PriorUnavailableError,
    ProtocolError,
    SdsInpaintError,
    TrainingDivergedError,
)
from .field import PositionalEncoding, RadianceField, load_checkpoint, save_checkpoint  # noqa: E402
from .render import Camera, render_view  # noqa: E402

__all__ = [
    "Camera",
    "CheckpointFormatError",
    "ConfigError",
    "DatasetError",
    "DegenerateNormalError",
    "EmptyMaskError",
    "InvalidDepthError",
    "InvalidInputError",
    "InvalidTimestepError",
    "PositionalEncoding",
    "PriorUnavailableError",
    "ProtocolError",
    "RadianceField",
    "SdsInpaintError",
    "TrainingDivergedError",
    "load_checkpoint",
    "render_view",
    "save_checkpoint",
]
