"""Mining contact-onset moments from video parses into grasp training data.

A hand that transitions from no contact in one frame to object contact in the
next pins down the instant a grasp begins: the frame before shows the object
untouched, the frame after shows the hand holding it. Tracking hands across
frames, harvesting those transitions, and filtering out confounded scenes
(another hand on the object, or the object moved) yields pairs of pre-contact
object crops and post-contact hand poses. Clustering the poses into a small
codebook turns grasp prediction into classification, which avoids the
mode-averaging that plagues direct pose regression.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import cv2
import numpy as np

from .association import ImageParse, ParsedHand
from .data_model import BBox, ContactState, HandSide
from .errors import DataError, EventExcluded
from .evaluation import iou
from .mesh_quality import MeshRecord

__all__ = [
    "CONTACT_TARGET_STATES",
    "Codebook",
    "ContactEvent",
    "FilterParams",
    "GraspTrainConfig",
    "Track",
    "TrackStep",
    "appearance_distance",
    "assign_code",
    "build_codebook",
    "build_tracks",
    "extract_pair",
    "filter_events",
    "find_contact_events",
    "load_codebook",
    "load_events",
    "load_grasp_classifier",
    "save_codebook",
    "save_events",
    "train_grasp_classifier",
]

# states that mark a hand as holding a boxed object (contact with another
# person or with oneself never yields a grasp sample)
CONTACT_TARGET_STATES = frozenset(
    {ContactState.PORTABLE_OBJECT, ContactState.NON_PORTABLE_OBJECT}
)


# --------------------------------------------------------------------------
# tracks


@dataclass(frozen=True)
class TrackStep:
    """One observation of a tracked hand.

    ``linked_box`` is the box of the object the hand linked to in its parse,
    resolved at tracking time so tracks stay self-contained.
    """

    frame_index: int
    hand: ParsedHand
    linked_box: BBox | None = None

    def __post_init__(self):
        if (self.linked_box is None) != (self.hand.object_link is None):
            raise DataError("linked_box must be present exactly when the hand links to an object")

    @property
    def box(self) -> BBox:
        return self.hand.box

    @property
    def state(self) -> ContactState:
        return self.hand.state


@dataclass(frozen=True)
class Track:
    """One hand followed across frames; steps are strictly ordered in time."""

    track_id: int
    steps: tuple[TrackStep, ...]

    def __post_init__(self):
        if not self.steps:
            raise DataError("a track needs at least one step")
        frames = [s.frame_index for s in self.steps]
        if any(b <= a for a, b in zip(frames, frames[1:])):
            raise DataError(f"track {self.track_id} frame indices must strictly increase")

    def __len__(self) -> int:
        return len(self.steps)


def build_tracks(
    parses: Sequence[ImageParse],
    frame_indices: Sequence[int] | None = None,
    iou_thresh: float = 0.3,
    max_gap: int = 5,
) -> list[Track]:
    """Greedy frame-to-frame IoU tracker.

    Each frame, live tracks claim hands in order of decreasing IoU with their
    last box (ties prefer the older track, then the earlier hand); pairs below
    ``iou_thresh`` never match. Unclaimed hands open new tracks; a track that
    goes unmatched for more than ``max_gap`` frames is closed. Frames default
    to positions 0..n-1 and must strictly increase when given explicitly.
    """
    if frame_indices is None:
        frame_indices = list(range(len(parses)))
    if len(frame_indices) != len(parses):
        raise DataError("frame_indices and parses must have equal length")
    if any(b <= a for a, b in zip(frame_indices, frame_indices[1:])):
        raise DataError("frame indices must strictly increase")
    if not (0.0 < iou_thresh <= 1.0) or max_gap < 0:
        raise DataError(f"bad tracker parameters: iou_thresh={iou_thresh}, max_gap={max_gap}")

    finished: list[Track] = []
    # live entries: [track_id, last_frame, last_box, steps]
    live: list[list] = []
    next_id = 0
    for frame, parse in zip(frame_indices, parses):
        still_live = []
        for entry in live:
            if frame - entry[1] > max_gap:
                finished.append(Track(entry[0], tuple(entry[3])))
            else:
                still_live.append(entry)
        live = still_live

        hands = list(parse.hands)
        steps = [
            TrackStep(
                frame,
                hand,
                None if hand.object_link is None else parse.objects[hand.object_link].box,
            )
            for hand in hands
        ]
        candidates = []
        for ti, entry in enumerate(live):
            for hi, hand in enumerate(hands):
                overlap = iou(entry[2], hand.box)
                if overlap >= iou_thresh:
                    candidates.append((-overlap, ti, hi))
        candidates.sort()
        used_tracks: set[int] = set()
        used_hands: set[int] = set()
        for neg_overlap, ti, hi in candidates:
            if ti in used_tracks or hi in used_hands:
                continue
            used_tracks.add(ti)
            used_hands.add(hi)
            entry = live[ti]
            entry[1] = frame
            entry[2] = hands[hi].box
            entry[3].append(steps[hi])
        for hi in range(len(hands)):
            if hi not in used_hands:
                live.append([next_id, frame, hands[hi].box, [steps[hi]]])
                next_id += 1

    finished.extend(Track(entry[0], tuple(entry[3])) for entry in live)
    finished.sort(key=lambda t: t.track_id)
    return finished


# --------------------------------------------------------------------------
# contact events


@dataclass(frozen=True)
class ContactEvent:
    """A contact onset: the tracked hand was free at t_before, holding at t_after.

    ``object_box`` comes from the hand's linked object at t_after. ``mesh``,
    ``quality``, and ``code`` are filled in by later pipeline stages.
    """

    track_id: int
    t_before: int
    t_after: int
    object_box: BBox
    hand_side: HandSide
    hand_box_before: BBox
    hand_box_after: BBox
    mesh: MeshRecord | None = None
    quality: float | None = None
    code: int | None = None

    def __post_init__(self):
        if self.t_before >= self.t_after:
            raise DataError(f"event needs t_before < t_after, got {self.t_before} >= {self.t_after}")
        if self.quality is not None and not (math.isfinite(self.quality)):
            raise DataError("event quality must be finite")
        object.__setattr__(self, "hand_side", HandSide(self.hand_side))


def find_contact_events(track: Track) -> list[ContactEvent]:
    """Scans adjacent track steps for NO_CONTACT -> object-contact transitions.

    Every adjacent pair where the state flips from NO_CONTACT to portable or
    non-portable contact emits one event, provided the hand at t_after
    actually carries an object link (no link means the object box is unknown
    and the moment is unusable).
    """
    events = []
    for before, after in zip(track.steps, track.steps[1:]):
        if before.state is not ContactState.NO_CONTACT:
            continue
        if after.state not in CONTACT_TARGET_STATES:
            continue
        if after.linked_box is None:
            continue
        events.append(
            ContactEvent(
                track_id=track.track_id,
                t_before=before.frame_index,
                t_after=after.frame_index,
                object_box=after.linked_box,
                hand_side=after.hand.side,
                hand_box_before=before.box,
                hand_box_after=after.box,
            )
        )
    return events


# --------------------------------------------------------------------------
# filtering and pair extraction

FrameProvider = Callable[[int], np.ndarray]


@dataclass(frozen=True)
class FilterParams:
    """Gates for confounded events.

    ``overlap_thresh``: another hand's IoU with the object box at t_before
    above this drops the event. ``move_thresh``: appearance distance between
    the object crop at t_before and t_after above this drops the event.
    """

    overlap_thresh: float = 0.1
    move_thresh: float = 0.25
    crop_size: int = 64

    def __post_init__(self):
        if not (0.0 <= self.overlap_thresh <= 1.0):
            raise DataError(f"overlap_thresh must lie in [0, 1], got {self.overlap_thresh}")
        if self.move_thresh < 0.0 or self.crop_size < 1:
            raise DataError("move_thresh must be non-negative and crop_size positive")


def _crop(frame: np.ndarray, box: BBox) -> np.ndarray:
    h, w = frame.shape[:2]
    clamped = box.clamped(float(w), float(h))
    x1 = int(math.floor(clamped.x1))
    y1 = int(math.floor(clamped.y1))
    x2 = min(int(math.ceil(clamped.x2)), w)
    y2 = min(int(math.ceil(clamped.y2)), h)
    if x2 <= x1 or y2 <= y1:
        raise DataError(f"box {box.as_list()} produces an empty crop")
    return frame[y1:y2, x1:x2]


def appearance_distance(a: np.ndarray, b: np.ndarray, size: int = 64) -> float:
    """Mean absolute difference of two crops after resizing and normalization.

    Both crops are converted to grayscale, resized to ``size`` x ``size``, and
    standardized to zero mean and unit deviation, so global brightness and
    contrast changes cost nothing while content changes cost a lot. Identical
    crops score exactly zero; unrelated textures land near 1.1.
    """

    def prepare(img: np.ndarray) -> np.ndarray:
        img = np.asarray(img, dtype=np.float64)
        if img.ndim == 3:
            img = img.mean(axis=2)
        if img.shape != (size, size):
            img = cv2.resize(img, (size, size), interpolation=cv2.INTER_AREA)
        return (img - img.mean()) / (img.std() + 1e-6)

    return float(np.abs(prepare(a) - prepare(b)).mean())


def filter_events(
    events: Iterable[ContactEvent],
    frame_provider: FrameProvider,
    parse_provider: Mapping[int, ImageParse] | Callable[[int], ImageParse],
    params: FilterParams = FilterParams(),
) -> list[ContactEvent]:
    """Drops events confounded by a second hand or by object motion.

    An event survives when (a) no other hand's box at t_before overlaps the
    object box with IoU above ``overlap_thresh``, and (b) the object crop
    looks the same at t_before and t_after (appearance distance at most
    ``move_thresh``). Output preserves order and is always a subset of the
    input.
    """
    lookup = parse_provider.__getitem__ if isinstance(parse_provider, Mapping) else parse_provider
    kept = []
    for event in events:
        try:
            parse_before = lookup(event.t_before)
            frame_before = frame_provider(event.t_before)
            frame_after = frame_provider(event.t_after)
        except KeyError as err:
            raise DataError(f"cannot resolve frame {err} for event filtering") from err

        own = event.hand_box_before
        crowded = any(
            hand.box != own and iou(hand.box, event.object_box) > params.overlap_thresh
            for hand in parse_before.hands
        )
        if crowded:
            continue
        moved = appearance_distance(
            _crop(frame_before, event.object_box),
            _crop(frame_after, event.object_box),
            size=params.crop_size,
        )
        if moved > params.move_thresh:
            continue
        kept.append(event)
    return kept


def extract_pair(
    event: ContactEvent,
    frame_provider: FrameProvider,
    quality_floor: float = 0.5,
    margin: float = 0.2,
) -> tuple[np.ndarray, MeshRecord]:
    """Produces the (pre-contact object crop, post-contact hand mesh) pair.

    The object box is grown by ``margin`` (20% means each dimension scaled by
    1.2 about the center) for context, clamped to the frame, and cropped from
    the t_before image. Events without a mesh, with quality below the floor,
    or whose box misses the frame entirely raise EventExcluded with a stable
    reason code.
    """
    if event.mesh is None:
        raise EventExcluded("missing_mesh")
    if event.quality is None or event.quality < quality_floor:
        raise EventExcluded("quality_below_floor")
    frame = frame_provider(event.t_before)
    expanded = event.object_box.scaled(1.0 + margin)
    try:
        crop = _crop(frame, expanded)
    except DataError as err:
        raise EventExcluded("box_outside_frame") from err
    return crop, event.mesh


# --------------------------------------------------------------------------
# pose codebook


@dataclass(frozen=True)
class Codebook:
    """K representative pose vectors; assignment is nearest center in Euclidean distance."""

    centers: np.ndarray
    seed: int = 0
    inertia_history: tuple[float, ...] = field(default=())

    def __post_init__(self):
        centers = np.array(self.centers, dtype=float)
        if centers.ndim != 2 or centers.shape[0] < 1:
            raise DataError(f"centers must be a non-empty K x D matrix, got shape {centers.shape}")
        if not np.isfinite(centers).all():
            raise DataError("codebook centers must be finite")
        centers.setflags(write=False)
        object.__setattr__(self, "centers", centers)
        object.__setattr__(self, "inertia_history", tuple(float(v) for v in self.inertia_history))

    @property
    def k(self) -> int:
        return int(self.centers.shape[0])

    @property
    def dim(self) -> int:
        return int(self.centers.shape[1])


def _nearest_center(thetas: np.ndarray, centers: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Index of the closest center per row (ties to the lowest index) and squared distances."""
    sq = ((thetas[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    idx = sq.argmin(axis=1)  # argmin takes the first minimum, i.e. the lowest index
    return idx, sq[np.arange(len(thetas)), idx]


def build_codebook(
    thetas,
    k: int = 10,
    seed: int = 0,
    max_iter: int = 300,
    tol: float = 1e-6,
) -> Codebook:
    """K-means over pose vectors with farthest-point seeding.

    The first center is a seeded random sample; each further center is the
    point farthest from every center chosen so far (ties to the lowest
    index). Lloyd iterations then alternate nearest-center assignment and
    mean updates until centers move less than ``tol`` or ``max_iter`` passes.
    Empty clusters keep their previous center. Fixed seed gives a fixed
    result; the recorded inertia history never increases.
    """
    X = np.asarray(thetas, dtype=float)
    if X.ndim != 2 or X.shape[0] == 0:
        raise DataError(f"thetas must be a non-empty N x D matrix, got shape {X.shape}")
    if not np.isfinite(X).all():
        raise DataError("pose vectors must be finite")
    n = X.shape[0]
    if k < 1 or k > n:
        raise DataError(f"k must satisfy 1 <= k <= {n}, got {k}")
    if max_iter < 1 or tol < 0.0:
        raise DataError("max_iter must be positive and tol non-negative")

    rng = np.random.RandomState(int(seed))
    chosen = [int(rng.randint(n))]
    min_sq = ((X - X[chosen[0]]) ** 2).sum(axis=1)
    while len(chosen) < k:
        nxt = int(min_sq.argmax())
        chosen.append(nxt)
        min_sq = np.minimum(min_sq, ((X - X[nxt]) ** 2).sum(axis=1))
    centers = X[chosen].copy()

    history = []
    for _ in range(max_iter):
        assignment, sq_dist = _nearest_center(X, centers)
        history.append(float(sq_dist.sum()))
        new_centers = centers.copy()
        for j in range(k):
            members = assignment == j
            if members.any():
                new_centers[j] = X[members].mean(axis=0)
        movement = float(np.sqrt(((new_centers - centers) ** 2).sum(axis=1)).max())
        centers = new_centers
        if movement < tol:
            break
    assignment, sq_dist = _nearest_center(X, centers)
    history.append(float(sq_dist.sum()))
    return Codebook(centers=centers, seed=int(seed), inertia_history=tuple(history))


def assign_code(theta, codebook: Codebook) -> int:
    """Nearest codebook center by Euclidean distance; ties take the lowest index."""
    vec = np.asarray(theta, dtype=float)
    if vec.ndim != 1 or vec.shape[0] != codebook.dim:
        raise DataError(
            f"theta has shape {vec.shape}, codebook expects vectors of dimension {codebook.dim}"
        )
    idx, _ = _nearest_center(vec[None, :], codebook.centers)
    return int(idx[0])


def save_codebook(codebook: Codebook, path) -> None:
    """Plain-text codebook: a `K D seed` header line, then one center per line."""
    lines = [f"{codebook.k} {codebook.dim} {codebook.seed}"]
    for row in codebook.centers:
        lines.append(" ".join(repr(float(v)) for v in row))
    Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def load_codebook(path) -> Codebook:
    path = Path(path)
    if not path.exists():
        raise DataError(f"codebook file not found: {path}")
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines:
        raise DataError(f"codebook file {path} is empty")
    header = lines[0].split()
    if len(header) != 3:
        raise DataError(f"codebook header must be 'K D seed', got {lines[0]!r}")
    try:
        k, dim, seed = (int(v) for v in header)
        rows = [[float(v) for v in line.split()] for line in lines[1 : k + 1]]
    except ValueError as err:
        raise DataError(f"malformed codebook file {path}: {err}") from err
    if len(rows) != k or any(len(r) != dim for r in rows):
        raise DataError(f"codebook file {path} does not match its header {k}x{dim}")
    return Codebook(centers=np.array(rows, dtype=float), seed=seed)


# --------------------------------------------------------------------------
# events file


def save_events(events: Iterable[ContactEvent], path) -> None:
    """Writes events as one JSON object per line (meshes are not serialized)."""
    lines = []
    for ev in events:
        lines.append(
            json.dumps(
                {
                    "track_id": ev.track_id,
                    "t_before": ev.t_before,
                    "t_after": ev.t_after,
                    "object_box": list(ev.object_box.as_list()),
                    "hand_side": ev.hand_side.value,
                    "hand_box_before": list(ev.hand_box_before.as_list()),
                    "hand_box_after": list(ev.hand_box_after.as_list()),
                    "quality": ev.quality,
                    "code": ev.code,
                },
                sort_keys=True,
            )
        )
    Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")


# --------------------------------------------------------------------------
# grasp classifier


@dataclass(frozen=True)
class GraspTrainConfig:
    """Training settings for the crop-to-grasp classifier.

    ``mode`` selects the target: ``codebook`` classifies into ``k`` codes
    (recommended; direct regression averages across grasp modes), while
    ``regression`` predicts the ``theta_dim`` pose vector with an L2 loss.
    Side prediction is a joint auxiliary head in both modes.
    """

    epochs: int = 50
    learning_rate: float = 1e-3
    batch_size: int = 16
    seed: int = 0
    backbone: str = "tiny"
    k: int = 10
    mode: str = "codebook"
    theta_dim: int = 45
    side_weight: float = 1.0
    input_size: int = 64

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.learning_rate <= 0.0:
            raise DataError("epochs, batch_size, and learning_rate must be positive")
        if self.k < 2 or self.theta_dim < 1 or self.input_size < 8:
            raise DataError("k must be >= 2, theta_dim >= 1, input_size >= 8")
        if self.mode not in ("codebook", "regression"):
            raise DataError(f"unknown training mode '{self.mode}'")
        if self.side_weight < 0.0 or self.seed < 0:
            raise DataError("side_weight and seed must be non-negative")


def train_grasp_classifier(pairs, config: GraspTrainConfig | None = None):
    """Trains the crop classifier; returns (classifier, per-epoch history).

    ``pairs`` holds (crop, code, side) triples in codebook mode or
    (crop, theta, side) in regression mode. Deterministic for a fixed seed.
    """
    from ._grasp_net import train_grasp_classifier as impl

    return impl(pairs, config or GraspTrainConfig())


def load_grasp_classifier(path):
    from ._grasp_net import GraspClassifier

    return GraspClassifier.load(path)


def load_events(path) -> list[ContactEvent]:
    from .errors import AnnotationFormatError

    path = Path(path)
    if not path.exists():
        raise DataError(f"events file not found: {path}")
    events = []
    for line_no, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            raw = json.loads(line)
            events.append(
                ContactEvent(
                    track_id=int(raw["track_id"]),
                    t_before=int(raw["t_before"]),
                    t_after=int(raw["t_after"]),
                    object_box=BBox.from_list(raw["object_box"]),
                    hand_side=HandSide(raw["hand_side"]),
                    hand_box_before=BBox.from_list(raw["hand_box_before"]),
                    hand_box_after=BBox.from_list(raw["hand_box_after"]),
                    quality=None if raw["quality"] is None else float(raw["quality"]),
                    code=None if raw["code"] is None else int(raw["code"]),
                )
            )
        except json.JSONDecodeError as err:
            raise AnnotationFormatError(f"invalid JSON: {err}", line=line_no) from err
        except KeyError as err:
            raise AnnotationFormatError(f"missing key {err}", line=line_no) from err
        except (DataError, ValueError, TypeError) as err:
            raise AnnotationFormatError(str(err), line=line_no) from err
    return events
