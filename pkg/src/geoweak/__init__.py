"""Weakly supervised school detection pipeline: points to auto-labeled
detection datasets, two-stage training, tuning and evaluation."""

from geoweak.boxes import BBox
from geoweak.errors import (
    BackendUnavailable,
    DecodeError,
    GeoweakError,
    InputError,
    NotFoundError,
    RetryableError,
)

__version__ = "0.1.0"

__all__ = [
    "BBox",
    "BackendUnavailable",
    "DecodeError",
    "GeoweakError",
    "InputError",
    "NotFoundError",
    "RetryableError",
]
