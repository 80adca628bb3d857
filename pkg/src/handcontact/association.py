"""Turn soft detections into a discrete parse.

A parse keeps the confident hands and objects, assigns hard side/state
labels by argmax, and links each contacted hand to the object whose center
best matches the hand's predicted target point (box center plus offset).
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from .data_model import LINKABLE_STATES, BBox, ContactState, HandSide, ImageRecord
from .detector.targets import encode_offset
from .detector.types import HandDetection, ObjectDetection
from .errors import AnnotationFormatError, DataError

__all__ = [
    "ParsedHand",
    "ImageParse",
    "predict_target_point",
    "parse",
    "parse_from_record",
    "save_parses",
    "load_parses",
]


@dataclass(frozen=True)
class ParsedHand:
    """A kept hand detection with hard labels and an optional object link."""

    detection: HandDetection
    side: HandSide
    state: ContactState
    object_link: int | None = None

    @property
    def box(self) -> BBox:
        return self.detection.box

    @property
    def score(self) -> float:
        return self.detection.score


@dataclass(frozen=True)
class ImageParse:
    """Parsed detections for one image.

    Invariant: a hand carries ``object_link`` exactly when its state allows
    contact with a boxed entity and at least one object survived
    thresholding; several hands may share one object.
    """

    image_id: str
    width: int
    height: int
    hands: tuple[ParsedHand, ...]
    objects: tuple[ObjectDetection, ...]

    def __post_init__(self) -> None:
        if self.width <= 0 or self.height <= 0:
            raise DataError(f"image dimensions must be positive, got {self.width}x{self.height}")
        for k, hand in enumerate(self.hands):
            link = hand.object_link
            if hand.state in LINKABLE_STATES:
                if self.objects and link is None:
                    raise DataError(f"hand {k} has contact state {hand.state.name} but no link")
                if link is not None and not 0 <= link < len(self.objects):
                    raise DataError(f"hand {k} links to object {link}, out of range")
                if not self.objects and link is not None:
                    raise DataError(f"hand {k} links to object {link} but no objects kept")
            elif link is not None:
                raise DataError(f"hand {k} has state {hand.state.name} and must not carry a link")


def predict_target_point(hand: HandDetection, image_size: tuple[float, float]) -> tuple[float, float]:
    """Pixel location the hand's offset points at: center + mag*diag*dir."""
    width, height = image_size
    diagonal = math.hypot(width, height)
    cx, cy = hand.box.center()
    dx, dy = hand.offset_dir
    return (cx + hand.offset_mag * diagonal * dx, cy + hand.offset_mag * diagonal * dy)


def _argmax(probs: Sequence[float]) -> int:
    return max(range(len(probs)), key=lambda k: (probs[k], -k))


def parse(
    hands: Sequence[HandDetection],
    objects: Sequence[ObjectDetection],
    image_size: tuple[int, int],
    hand_thresh: float = 0.5,
    object_thresh: float = 0.5,
    image_id: str = "",
) -> ImageParse:
    """Threshold detections, label them, and link contacted hands to objects.

    Each kept hand with a contact state in LINKABLE_STATES links to the kept
    object whose center lies nearest its predicted target point; ties go to
    the higher-scoring object, then the lower index. NO_CONTACT and
    SELF_CONTACT hands never link.
    """
    if not 0 <= hand_thresh <= 1 or not 0 <= object_thresh <= 1:
        raise DataError("thresholds must lie in [0, 1]")
    kept_objects = tuple(obj for obj in objects if obj.score >= object_thresh)
    centers = [obj.box.center() for obj in kept_objects]

    parsed = []
    for hand in hands:
        if hand.score < hand_thresh:
            continue
        side = HandSide(_argmax(hand.side_probs))
        state = ContactState(_argmax(hand.state_probs))
        link = None
        if state in LINKABLE_STATES and kept_objects:
            tx, ty = predict_target_point(hand, image_size)
            link = min(
                range(len(kept_objects)),
                key=lambda j: (
                    math.hypot(centers[j][0] - tx, centers[j][1] - ty),
                    -kept_objects[j].score,
                    j,
                ),
            )
        parsed.append(ParsedHand(detection=hand, side=side, state=state, object_link=link))
    return ImageParse(
        image_id=image_id,
        width=int(image_size[0]),
        height=int(image_size[1]),
        hands=tuple(parsed),
        objects=kept_objects,
    )


def _one_hot(index: int, size: int) -> tuple[float, ...]:
    return tuple(1.0 if k == index else 0.0 for k in range(size))


def parse_from_record(record: ImageRecord, score: float = 1.0) -> ImageParse:
    """Lift ground-truth annotations into a parse with the given score.

    Useful for evaluating one annotation file against another and for
    perfect-prediction fixtures. Offsets are re-encoded from the linked
    object; non-linkable states get a null offset and no link.
    """
    hands = []
    for ann in record.hands:
        linked = ann.state in LINKABLE_STATES and ann.object_index is not None
        if linked:
            target = encode_offset(ann.box, record.objects[ann.object_index], (record.width, record.height))
            offset_dir, offset_mag = target.dir, target.mag
        else:
            offset_dir, offset_mag = (1.0, 0.0), 0.0
        detection = HandDetection(
            box=ann.box,
            score=score,
            side_probs=_one_hot(int(ann.side), 2),
            state_probs=_one_hot(int(ann.state), 5),
            offset_dir=offset_dir,
            offset_mag=offset_mag,
        )
        hands.append(ParsedHand(
            detection=detection,
            side=ann.side,
            state=ann.state,
            object_link=ann.object_index if linked else None,
        ))
    objects = tuple(ObjectDetection(box=box, score=score) for box in record.objects)
    return ImageParse(
        image_id=record.image_id,
        width=record.width,
        height=record.height,
        hands=tuple(hands),
        objects=objects,
    )


def _parse_to_dict(p: ImageParse) -> dict:
    return {
        "image_id": p.image_id,
        "width": p.width,
        "height": p.height,
        "hands": [
            {
                "box": hand.box.as_list(),
                "score": hand.score,
                "side": int(hand.side),
                "state": int(hand.state),
                "object_index": hand.object_link,
            }
            for hand in p.hands
        ],
        "objects": [{"box": obj.box.as_list(), "score": obj.score} for obj in p.objects],
    }


def _parse_from_dict(data: dict, line: int) -> ImageParse:
    try:
        hands = []
        for entry in data["hands"]:
            side = int(entry["side"])
            state = int(entry["state"])
            detection = HandDetection(
                box=BBox.from_list(entry["box"]),
                score=float(entry["score"]),
                side_probs=_one_hot(side, 2),
                state_probs=_one_hot(state, 5),
                offset_dir=(1.0, 0.0),
                offset_mag=0.0,
            )
            link = entry.get("object_index")
            hands.append(ParsedHand(
                detection=detection,
                side=HandSide(side),
                state=ContactState(state),
                object_link=None if link is None else int(link),
            ))
        objects = tuple(
            ObjectDetection(box=BBox.from_list(entry["box"]), score=float(entry["score"]))
            for entry in data["objects"]
        )
        return ImageParse(
            image_id=str(data["image_id"]),
            width=int(data["width"]),
            height=int(data["height"]),
            hands=tuple(hands),
            objects=objects,
        )
    except KeyError as err:
        raise AnnotationFormatError(f"missing key {err}", line=line) from err
    except (TypeError, ValueError) as err:
        raise AnnotationFormatError(str(err), line=line) from err


def save_parses(parses: Sequence[ImageParse], path: str | Path) -> None:
    """Write one parse per line. Soft probabilities and offsets are not
    stored; loading reconstructs one-hot distributions from the labels."""
    with open(path, "w", encoding="utf-8") as fh:
        for p in parses:
            fh.write(json.dumps(_parse_to_dict(p)) + "\n")


def load_parses(path: str | Path) -> list[ImageParse]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"parse file not found: {path}")
    parses = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                data = json.loads(line)
            except json.JSONDecodeError as err:
                raise AnnotationFormatError(f"invalid record: {err.msg}", line=line_no) from err
            parses.append(_parse_from_dict(data, line_no))
    return parses
