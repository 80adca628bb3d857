"""Detection output types shared by the model, association, and evaluation.

Kept free of heavyweight imports so downstream modules can consume
detections without pulling in the training stack.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

from ..data_model import BBox
from ..errors import DataError

_PROB_TOL = 1e-6


def _check_prob(value: float, name: str) -> None:
    if not (-_PROB_TOL <= value <= 1 + _PROB_TOL):
        raise DataError(f"{name} must be in [0, 1], got {value}")


def _check_distribution(probs: tuple[float, ...], size: int, name: str) -> None:
    if len(probs) != size:
        raise DataError(f"{name} must have {size} entries, got {len(probs)}")
    for p in probs:
        _check_prob(p, name)
    total = sum(probs)
    if abs(total - 1.0) > _PROB_TOL:
        raise DataError(f"{name} must sum to 1, got {total}")


@dataclass(frozen=True)
class HandDetection:
    """A scored hand box with side/state distributions and a contact offset.

    ``offset_dir`` is a unit vector pointing from the hand-box center toward
    the contacted object's center; ``offset_mag`` is that distance as a
    fraction of the image diagonal.
    """

    box: BBox
    score: float
    side_probs: tuple[float, float]
    state_probs: tuple[float, float, float, float, float]
    offset_dir: tuple[float, float]
    offset_mag: float

    def __post_init__(self) -> None:
        _check_prob(self.score, "score")
        _check_distribution(self.side_probs, 2, "side_probs")
        _check_distribution(self.state_probs, 5, "state_probs")
        norm = math.hypot(self.offset_dir[0], self.offset_dir[1])
        if abs(norm - 1.0) > _PROB_TOL:
            raise DataError(f"offset_dir must be a unit vector, norm {norm}")
        if self.offset_mag < 0:
            raise DataError(f"offset_mag must be non-negative, got {self.offset_mag}")


@dataclass(frozen=True)
class ObjectDetection:
    """A scored box for an object (or person) in contact with some hand."""

    box: BBox
    score: float

    def __post_init__(self) -> None:
        _check_prob(self.score, "score")
