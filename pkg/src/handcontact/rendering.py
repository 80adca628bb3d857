"""Drawing helpers: annotated detection overlays and precision-recall plots.

All output is pure pixel math on top of Pillow primitives, so rendering the
same inputs twice produces identical arrays (and identical PNG bytes).
"""

from __future__ import annotations

from typing import Mapping

import numpy as np
from PIL import Image, ImageDraw, ImageFont

from .association import ImageParse
from .data_model import ContactState, HandSide
from .errors import DataError
from .evaluation import EvalCriterion, PRCurve

# Fixed color coding: hands by side, objects, and hand-to-object links each
# get a reserved color so tests can count pixels per role.
LEFT_HAND_COLOR = (66, 133, 244)
RIGHT_HAND_COLOR = (219, 68, 55)
OBJECT_COLOR = (52, 168, 83)
LINK_COLOR = (255, 191, 0)

STATE_LABELS = {
    ContactState.NO_CONTACT: "N",
    ContactState.SELF_CONTACT: "S",
    ContactState.OTHER_PERSON: "O",
    ContactState.PORTABLE_OBJECT: "P",
    ContactState.NON_PORTABLE_OBJECT: "F",
}

SIDE_LABELS = {HandSide.LEFT: "L", HandSide.RIGHT: "R"}

CURVE_COLORS = {
    EvalCriterion.HAND: (66, 133, 244),
    EvalCriterion.OBJ: (52, 168, 83),
    EvalCriterion.H_SIDE: (219, 68, 55),
    EvalCriterion.H_STATE: (171, 71, 188),
    EvalCriterion.H_O: (255, 143, 0),
    EvalCriterion.ALL: (38, 50, 56),
}


def _as_rgb(image: np.ndarray) -> np.ndarray:
    arr = np.asarray(image)
    if arr.ndim != 3 or arr.shape[2] != 3 or arr.dtype != np.uint8:
        raise DataError(f"expected HxWx3 uint8 image, got {arr.shape} {arr.dtype}")
    return arr


def _center(box) -> tuple[float, float]:
    return (0.5 * (box.x1 + box.x2), 0.5 * (box.y1 + box.y2))


def render_parse(image: np.ndarray, parse: ImageParse, line_width: int = 2) -> np.ndarray:
    """Draw a parse on a copy of the image.

    Objects and hands get boxes in their fixed colors, each hand a side/state
    tag, and each linked hand a line from its center to the object center.
    A parse with no detections returns the image unchanged.
    """
    arr = _as_rgb(image)
    if line_width < 1:
        raise DataError(f"line_width must be >= 1, got {line_width}")
    if not parse.hands and not parse.objects:
        return arr.copy()

    canvas = Image.fromarray(np.ascontiguousarray(arr))
    draw = ImageDraw.Draw(canvas)
    font = ImageFont.load_default()

    for obj in parse.objects:
        draw.rectangle(obj.box.as_list(), outline=OBJECT_COLOR, width=line_width)
    for hand in parse.hands:
        color = LEFT_HAND_COLOR if hand.side is HandSide.LEFT else RIGHT_HAND_COLOR
        draw.rectangle(hand.detection.box.as_list(), outline=color, width=line_width)
    for hand in parse.hands:
        if hand.object_link is None:
            continue
        start = _center(hand.detection.box)
        end = _center(parse.objects[hand.object_link].box)
        draw.line([start, end], fill=LINK_COLOR, width=line_width)
    for hand in parse.hands:
        color = LEFT_HAND_COLOR if hand.side is HandSide.LEFT else RIGHT_HAND_COLOR
        tag = f"{SIDE_LABELS[hand.side]}:{STATE_LABELS[hand.state]}"
        draw.text((hand.detection.box.x1 + 2, hand.detection.box.y1 + 2),
                  tag, fill=color, font=font)
    return np.asarray(canvas)


def render_pr_curves(
    results: Mapping[EvalCriterion, PRCurve],
    size: tuple[int, int] = (480, 360),
) -> np.ndarray:
    """Plot precision-recall curves for each criterion on a white canvas."""
    width, height = size
    if width < 120 or height < 90:
        raise DataError(f"plot size too small: {size}")
    margin = 40
    canvas = Image.new("RGB", (width, height), (255, 255, 255))
    draw = ImageDraw.Draw(canvas)
    font = ImageFont.load_default()

    x0, y0 = margin, height - margin
    x1, y1 = width - margin // 2, margin // 2
    draw.line([(x0, y0), (x1, y0)], fill=(0, 0, 0), width=1)
    draw.line([(x0, y0), (x0, y1)], fill=(0, 0, 0), width=1)
    for frac in (0.0, 0.5, 1.0):
        tx = x0 + frac * (x1 - x0)
        ty = y0 - frac * (y0 - y1)
        draw.text((tx - 6, y0 + 4), f"{frac:.1f}", fill=(0, 0, 0), font=font)
        draw.text((4, ty - 5), f"{frac:.1f}", fill=(0, 0, 0), font=font)

    def to_px(recall: float, precision: float) -> tuple[float, float]:
        return (x0 + recall * (x1 - x0), y0 - precision * (y0 - y1))

    legend_y = y1
    for criterion in EvalCriterion:
        if criterion not in results:
            continue
        curve = results[criterion]
        color = CURVE_COLORS[criterion]
        points = [to_px(0.0, curve.precision[0] if len(curve.precision) else 1.0)]
        points += [to_px(r, p) for r, p in zip(curve.recall, curve.precision)]
        if len(points) >= 2:
            draw.line(points, fill=color, width=2)
        draw.text((x0 + 8, legend_y), f"{criterion.value} AP={curve.ap:.3f}",
                  fill=color, font=font)
        legend_y += 12
    return np.asarray(canvas)


def save_image(image: np.ndarray, path) -> None:
    """Write an RGB array as PNG (lossless, deterministic bytes)."""
    Image.fromarray(np.ascontiguousarray(_as_rgb(image))).save(path, format="PNG")


def load_image(path) -> np.ndarray:
    """Read an image file as an RGB uint8 array."""
    try:
        with Image.open(path) as img:
            # copy: PIL hands back a read-only view, downstream code mutates
            return np.asarray(img.convert("RGB")).copy()
    except FileNotFoundError as exc:
        raise DataError(f"image not found: {path}") from exc
    except OSError as exc:
        raise DataError(f"unreadable image {path}: {exc}") from exc
