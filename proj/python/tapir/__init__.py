"""Synthetic surgical video pipeline: data generation, metrics and the command line."""

import json

from ._core import NumericError, ValidationError, average_precision, iou, lr_at, run_cli
from . import _core

__all__ = [
    "NumericError",
    "ValidationError",
    "average_precision",
    "build_index",
    "detection_map",
    "frame_map",
    "iou",
    "lr_at",
    "render_frame",
    "run_cli",
    "validate",
]


def build_index(generator=None):
    """Annotation document (dict) of a generated dataset, without rendering."""
    return json.loads(_core._build_index(json.dumps(generator or {})))


def validate(dataset):
    """Schema violations of an annotation document, as a list of dicts."""
    return json.loads(_core._validate(json.dumps(dataset)))


def render_frame(generator, video, frame):
    """One frame of a generated video as a uint8 array of shape (H, W, 3)."""
    return _core._render_frame(json.dumps(generator or {}), video, frame)


def frame_map(predictions, dataset, task):
    return json.loads(_core._frame_map(json.dumps(predictions), json.dumps(dataset), task))


def detection_map(predictions, dataset, mode="instrument", iou_threshold=0.5):
    return json.loads(_core._detection_map(json.dumps(predictions), json.dumps(dataset), mode, iou_threshold))
