"""Domain types, annotation I/O, uploader-disjoint splits, and dataset stats.

Annotations live in newline-delimited JSON: one record per image with hand
boxes, sides, 5-way contact states, and category-free object boxes that hands
link to by index. Boxes are stored in absolute pixels; operations that need a
normalized frame do the normalization themselves.
"""

from __future__ import annotations

import json
import math
import random
from dataclasses import dataclass
from enum import IntEnum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import AnnotationFormatError, DataError


class ContactState(IntEnum):
    """5-way contact state of a hand. Codes are the stable wire format."""

    NO_CONTACT = 0
    SELF_CONTACT = 1
    OTHER_PERSON = 2
    PORTABLE_OBJECT = 3
    NON_PORTABLE_OBJECT = 4


#: States for which a hand is linked to a box in the objects list at parse
#: time. SELF_CONTACT is annotated with a box but never linked in predictions
#: (the contacted entity is the person's own body, which predictions do not
#: box separately).
LINKABLE_STATES = frozenset(
    {ContactState.OTHER_PERSON, ContactState.PORTABLE_OBJECT, ContactState.NON_PORTABLE_OBJECT}
)


class HandSide(IntEnum):
    LEFT = 0
    RIGHT = 1


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box, (x1, y1) top-left to (x2, y2), pixels, origin top-left."""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        vals = (self.x1, self.y1, self.x2, self.y2)
        if not all(math.isfinite(v) for v in vals):
            raise DataError(f"box coordinates must be finite, got {vals}")
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise DataError(f"box must satisfy x1 < x2 and y1 < y2, got {vals}")

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def diagonal(self) -> float:
        return math.hypot(self.width, self.height)

    def center(self) -> tuple[float, float]:
        return (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))

    def normalized(self, width: float, height: float) -> BBox:
        """This box mapped into the image's unit square."""
        return BBox(self.x1 / width, self.y1 / height, self.x2 / width, self.y2 / height)

    def clamped(self, width: float, height: float) -> BBox:
        """Intersection with the image rectangle; raises if fully outside."""
        x1 = min(max(self.x1, 0.0), width)
        y1 = min(max(self.y1, 0.0), height)
        x2 = min(max(self.x2, 0.0), width)
        y2 = min(max(self.y2, 0.0), height)
        if not (x1 < x2 and y1 < y2):
            raise DataError(f"box {self.as_list()} lies fully outside a {width}x{height} image")
        return BBox(x1, y1, x2, y2)

    def scaled(self, factor: float) -> BBox:
        """Box grown about its center; each dimension multiplied by ``factor``."""
        cx, cy = self.center()
        hw = 0.5 * self.width * factor
        hh = 0.5 * self.height * factor
        return BBox(cx - hw, cy - hh, cx + hw, cy + hh)

    def as_list(self) -> list[float]:
        return [self.x1, self.y1, self.x2, self.y2]

    @classmethod
    def from_list(cls, values: Sequence[float]) -> BBox:
        if len(values) != 4:
            raise DataError(f"box needs 4 coordinates, got {len(values)}")
        return cls(float(values[0]), float(values[1]), float(values[2]), float(values[3]))


@dataclass(frozen=True)
class HandAnnotation:
    """One hand: box, side, contact state, optional link into the objects list."""

    box: BBox
    side: HandSide
    state: ContactState
    object_index: int | None = None

    def __post_init__(self):
        if self.state == ContactState.NO_CONTACT:
            if self.object_index is not None:
                raise DataError("a NO_CONTACT hand cannot carry an object_index")
        elif self.object_index is None:
            raise DataError(f"a hand with state {self.state.name} requires an object_index")


@dataclass(frozen=True)
class ImageRecord:
    """All annotations of one image."""

    image_id: str
    uploader_id: str
    width: int
    height: int
    hands: tuple[HandAnnotation, ...] = ()
    objects: tuple[BBox, ...] = ()

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise DataError(f"image {self.image_id!r}: non-positive dimensions")
        referenced = set()
        for hand in self.hands:
            if hand.object_index is not None:
                if not 0 <= hand.object_index < len(self.objects):
                    raise DataError(
                        f"image {self.image_id!r}: object_index {hand.object_index} out of "
                        f"range for {len(self.objects)} objects"
                    )
                referenced.add(hand.object_index)
        unreferenced = set(range(len(self.objects))) - referenced
        if unreferenced:
            raise DataError(
                f"image {self.image_id!r}: objects {sorted(unreferenced)} referenced by no hand"
            )

    @property
    def diagonal(self) -> float:
        return math.hypot(self.width, self.height)


AnnotationSet = list[ImageRecord]


@dataclass(frozen=True)
class DatasetStats:
    """Histograms and counts over an annotation set.

    Hand size is the hand-box diagonal over the image diagonal; bins are
    uniform over [0, sqrt(2)].
    """

    hand_size_histogram: tuple[int, ...]
    state_histogram: tuple[int, ...]
    n_images: int
    n_hands: int
    n_objects: int

    def __post_init__(self):
        if sum(self.hand_size_histogram) != self.n_hands or sum(self.state_histogram) != self.n_hands:
            raise DataError("histogram totals must equal n_hands")


# --------------------------------------------------------------------------
# serialization

def record_to_dict(record: ImageRecord) -> dict:
    return {
        "image_id": record.image_id,
        "uploader_id": record.uploader_id,
        "width": record.width,
        "height": record.height,
        "hands": [
            {
                "box": hand.box.as_list(),
                "side": int(hand.side),
                "state": int(hand.state),
                "object_index": hand.object_index,
            }
            for hand in record.hands
        ],
        "objects": [box.as_list() for box in record.objects],
    }


def _parse_hand(entry: dict, line: int) -> HandAnnotation:
    try:
        box = BBox.from_list(entry["box"])
    except (KeyError, TypeError) as exc:
        raise AnnotationFormatError("missing or invalid hand box", line, "box") from exc
    except DataError as exc:
        raise AnnotationFormatError(str(exc), line, "box") from exc
    try:
        side = HandSide(entry["side"])
    except (KeyError, ValueError) as exc:
        raise AnnotationFormatError("hand side must be 0 or 1", line, "side") from exc
    try:
        state = ContactState(entry["state"])
    except (KeyError, ValueError) as exc:
        raise AnnotationFormatError("contact state must be an integer 0-4", line, "state") from exc
    object_index = entry.get("object_index")
    if object_index is not None and not isinstance(object_index, int):
        raise AnnotationFormatError("object_index must be an integer or null", line, "object_index")
    try:
        return HandAnnotation(box=box, side=side, state=state, object_index=object_index)
    except DataError as exc:
        raise AnnotationFormatError(str(exc), line, "object_index") from exc


def record_from_dict(data: dict, line: int = 0) -> ImageRecord:
    for key in ("image_id", "uploader_id", "width", "height"):
        if key not in data:
            raise AnnotationFormatError(f"missing required field '{key}'", line, key)
    hands = tuple(_parse_hand(h, line) for h in data.get("hands", []))
    try:
        objects = tuple(BBox.from_list(b) for b in data.get("objects", []))
    except DataError as exc:
        raise AnnotationFormatError(str(exc), line, "objects") from exc
    try:
        return ImageRecord(
            image_id=str(data["image_id"]),
            uploader_id=str(data["uploader_id"]),
            width=int(data["width"]),
            height=int(data["height"]),
            hands=hands,
            objects=objects,
        )
    except DataError as exc:
        raise AnnotationFormatError(str(exc), line) from exc


def load_annotations(path: str | Path) -> AnnotationSet:
    """Load an annotation file (one JSON record per line), validating invariants.

    Raises AnnotationFormatError with the offending line number on malformed
    records, and DataError if the file is missing or image ids repeat.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"annotation file not found: {path}")
    records: AnnotationSet = []
    seen: set[str] = set()
    with path.open("r", encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, start=1):
            raw = raw.strip()
            if not raw:
                continue
            try:
                data = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise AnnotationFormatError(f"invalid JSON: {exc.msg}", line_no) from exc
            record = record_from_dict(data, line_no)
            if record.image_id in seen:
                raise AnnotationFormatError(
                    f"duplicate image_id {record.image_id!r}", line_no, "image_id"
                )
            seen.add(record.image_id)
            records.append(record)
    return records


def save_annotations(records: Iterable[ImageRecord], path: str | Path) -> None:
    """Write records as newline-delimited JSON with canonical field order."""
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps(record_to_dict(record)) + "\n")


# --------------------------------------------------------------------------
# operations

def split_by_uploader(
    records: AnnotationSet,
    ratios: tuple[float, float, float] = (0.8, 0.1, 0.1),
    seed: int = 0,
) -> tuple[AnnotationSet, AnnotationSet, AnnotationSet]:
    """Partition images into train/val/test with uploader-disjoint splits.

    Uploaders are shuffled with the given seed and cut at the cumulative
    ratios (half-up rounding), so uploader counts track the ratios as closely
    as integer rounding allows and no uploader spans two splits.
    """
    if not records:
        raise DataError("cannot split an empty annotation set")
    if any(r <= 0 for r in ratios):
        raise DataError(f"split ratios must be positive, got {ratios}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise DataError(f"split ratios must sum to 1, got {sum(ratios)}")

    uploaders = sorted({r.uploader_id for r in records})
    rng = random.Random(seed)
    rng.shuffle(uploaders)
    n = len(uploaders)
    cut1 = int(ratios[0] * n + 0.5)
    cut2 = int((ratios[0] + ratios[1]) * n + 0.5)
    groups = (set(uploaders[:cut1]), set(uploaders[cut1:cut2]), set(uploaders[cut2:]))
    splits: tuple[AnnotationSet, AnnotationSet, AnnotationSet] = ([], [], [])
    for record in records:
        for group, split in zip(groups, splits):
            if record.uploader_id in group:
                split.append(record)
                break
    return splits


def compute_stats(records: AnnotationSet, n_bins: int = 20) -> DatasetStats:
    """Hand-size and contact-state histograms plus basic counts.

    Hand size is box diagonal / image diagonal, binned uniformly over
    [0, sqrt(2)] (sizes above sqrt(2), possible only for boxes exceeding the
    image, are clipped into the last bin to keep totals conserved).
    """
    if n_bins < 1:
        raise DataError(f"n_bins must be >= 1, got {n_bins}")
    sizes = []
    state_counts = [0] * len(ContactState)
    n_hands = 0
    n_objects = 0
    for record in records:
        n_objects += len(record.objects)
        for hand in record.hands:
            n_hands += 1
            sizes.append(min(hand.box.diagonal / record.diagonal, math.sqrt(2.0)))
            state_counts[int(hand.state)] += 1
    hist, _ = np.histogram(np.asarray(sizes), bins=n_bins, range=(0.0, math.sqrt(2.0)))
    return DatasetStats(
        hand_size_histogram=tuple(int(c) for c in hist),
        state_histogram=tuple(state_counts),
        n_images=len(records),
        n_hands=n_hands,
        n_objects=n_objects,
    )


def median_box(records: AnnotationSet, per_side: bool = False) -> BBox | dict[HandSide, BBox]:
    """Coordinate-wise median hand box in the normalized [0, 1]^2 image frame.

    Even counts use the true midpoint of the two central values. With
    ``per_side`` a separate median is computed for left and right hands.
    """

    def _median(hands: list[BBox]) -> BBox:
        arr = np.array([b.as_list() for b in hands], dtype=np.float64)
        med = np.median(arr, axis=0)
        return BBox.from_list(med.tolist())

    by_side: dict[HandSide, list[BBox]] = {HandSide.LEFT: [], HandSide.RIGHT: []}
    all_hands: list[BBox] = []
    for record in records:
        for hand in record.hands:
            norm = hand.box.normalized(record.width, record.height)
            all_hands.append(norm)
            by_side[hand.side].append(norm)

    if not per_side:
        if not all_hands:
            raise DataError("no hands in the annotation set")
        return _median(all_hands)
    out = {}
    for side, hands in by_side.items():
        if not hands:
            raise DataError(f"no {side.name} hands in the annotation set")
        out[side] = _median(hands)
    return out
