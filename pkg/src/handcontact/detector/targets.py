"""Target encoding for the contact-offset regression head."""
from __future__ import annotations

import math
from dataclasses import dataclass

from ..data_model import BBox
from ..errors import DataError

DEGENERATE_EPS = 1e-6


@dataclass(frozen=True)
class OffsetTarget:
    """Regression target for one hand: unit direction and diagonal-relative
    magnitude toward its contacted object. ``valid`` is false when the two
    centers coincide and the direction is undefined."""

    dir: tuple[float, float]
    mag: float
    valid: bool


def encode_offset(hand_box: BBox, object_box: BBox, image_size: tuple[float, float]) -> OffsetTarget:
    """Encode the hand-center to object-center vector as (unit dir, mag).

    The magnitude is normalized by the image diagonal so the target is
    invariant to resizing. Center distances below 1e-6 of the diagonal are
    treated as coincident: valid=False, dir=(1, 0), mag=0.
    """
    width, height = image_size
    if width <= 0 or height <= 0:
        raise DataError(f"degenerate image size ({width}, {height})")
    diagonal = math.hypot(width, height)
    hx, hy = hand_box.center()
    ox, oy = object_box.center()
    dx, dy = ox - hx, oy - hy
    distance = math.hypot(dx, dy)
    if distance < DEGENERATE_EPS * diagonal:
        return OffsetTarget(dir=(1.0, 0.0), mag=0.0, valid=False)
    return OffsetTarget(dir=(dx / distance, dy / distance), mag=distance / diagonal, valid=True)
