"""Self-supervised quality assessment for hand-mesh reconstructions.

A reconstructor that truly understands an image should be equivariant: rotate
the input and the predicted joints should rotate with it. We score each crop
by reconstructing several rotated copies, mapping the joints back to the
original frame, and measuring how much the copies disagree. Low disagreement
marks a trustworthy reconstruction. Sorting a corpus by this score yields
free positive/negative labels (most/least consistent 30%) on which a small
MLP over pose vectors learns to flag bad meshes at inference time, with no
human annotation anywhere in the loop.
"""

from __future__ import annotations

import json
import math
import pickle
import threading
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterable, Protocol, Sequence

import cv2
import numpy as np

from .data_model import BBox, HandSide
from .errors import AnnotationFormatError, DataError, ReconstructionError

__all__ = [
    "DEFAULT_ANGLES",
    "DEFAULT_JOINT_COUNT",
    "DEFAULT_THETA_DIM",
    "CentroidReconstructor",
    "GaussianScorer",
    "LabeledItem",
    "MeshRecord",
    "QualityLabel",
    "QualityLabelSet",
    "Reconstructor",
    "ScoredRecord",
    "SerializedReconstructor",
    "ThetaClassifier",
    "auroc",
    "baseline_gaussian",
    "baseline_nb",
    "consistency_score",
    "load_scored_records",
    "make_labels",
    "save_scored_records",
    "train_quality_mlp",
]

# Six small rotations keep the copies close to what a reconstructor saw in
# training while still exercising equivariance.
DEFAULT_ANGLES: tuple[float, ...] = (-30.0, -20.0, -10.0, 10.0, 20.0, 30.0)
DEFAULT_JOINT_COUNT = 21
DEFAULT_THETA_DIM = 45


# --------------------------------------------------------------------------
# domain types


class Reconstructor(Protocol):
    """Maps a hand crop plus its side to a mesh record.

    Implementations must be deterministic for fixed inputs and report joints
    as 2D projected points in the coordinate frame of the crop they were
    given.
    """

    def __call__(self, crop: np.ndarray, side: HandSide) -> "MeshRecord": ...


def _readonly_array(value, dtype=float) -> np.ndarray:
    arr = np.array(value, dtype=dtype)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class MeshRecord:
    """Output of a single mesh reconstruction.

    ``theta`` is the low-dimensional pose vector, ``joints_2d`` the projected
    joint locations (pixels, crop frame), ``beta`` an optional shape vector.
    """

    theta: np.ndarray
    joints_2d: np.ndarray
    side: HandSide
    beta: np.ndarray | None = None

    def __post_init__(self):
        theta = _readonly_array(self.theta)
        if theta.ndim != 1 or theta.size == 0:
            raise DataError(f"theta must be a non-empty vector, got shape {theta.shape}")
        joints = _readonly_array(self.joints_2d)
        if joints.ndim != 2 or joints.shape[1] != 2 or joints.shape[0] == 0:
            raise DataError(f"joints_2d must have shape (J, 2), got {joints.shape}")
        if not np.isfinite(theta).all() or not np.isfinite(joints).all():
            raise DataError("mesh record contains non-finite entries")
        beta = self.beta
        if beta is not None:
            beta = _readonly_array(beta)
            if beta.ndim != 1 or not np.isfinite(beta).all():
                raise DataError("beta must be a finite vector")
        object.__setattr__(self, "theta", theta)
        object.__setattr__(self, "joints_2d", joints)
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "side", HandSide(self.side))

    @property
    def joint_count(self) -> int:
        return int(self.joints_2d.shape[0])


class QualityLabel(Enum):
    POSITIVE = "positive"
    NEGATIVE = "negative"
    UNLABELED = "unlabeled"


@dataclass(frozen=True)
class LabeledItem:
    """One scored item with the quality label assigned to it."""

    item: object
    consistency: float
    label: QualityLabel

    def __post_init__(self):
        if not math.isfinite(self.consistency):
            raise DataError("consistency must be finite")


@dataclass(frozen=True)
class QualityLabelSet:
    """Labelled scoring results, kept in the order the items arrived."""

    items: tuple[LabeledItem, ...]

    def __len__(self) -> int:
        return len(self.items)

    def __iter__(self):
        return iter(self.items)

    def with_label(self, label: QualityLabel) -> list[LabeledItem]:
        return [it for it in self.items if it.label is label]

    def counts(self) -> dict[QualityLabel, int]:
        out = {label: 0 for label in QualityLabel}
        for it in self.items:
            out[it.label] += 1
        return out


# --------------------------------------------------------------------------
# rotation-consistency scoring


def _pad_to_rotation_safe(crop: np.ndarray) -> tuple[np.ndarray, int, int]:
    """Centers the crop on a square canvas big enough for any rotation."""
    h, w = crop.shape[:2]
    side = int(math.ceil(math.sqrt(2.0) * max(h, w)))
    shape = (side, side) + crop.shape[2:]
    canvas = np.zeros(shape, dtype=crop.dtype)
    oy = (side - h) // 2
    ox = (side - w) // 2
    canvas[oy : oy + h, ox : ox + w] = crop
    return canvas, ox, oy


_EXACT_COS_SIN = {0.0: (1.0, 0.0), 90.0: (0.0, 1.0), 180.0: (-1.0, 0.0), 270.0: (0.0, -1.0)}


def _cos_sin(angle_deg: float) -> tuple[float, float]:
    """cos/sin of the forward rotation, exact for multiples of 90 degrees."""
    reduced = float(angle_deg) % 360.0
    exact = _EXACT_COS_SIN.get(reduced)
    if exact is not None:
        return exact
    rad = math.radians(angle_deg)
    return math.cos(rad), math.sin(rad)


def _rotate_image(image: np.ndarray, angle_deg: float) -> np.ndarray:
    """Rotates a square image about its center ((S-1)/2 in both axes).

    The forward map on points is p' = R (p - c) + c with
    R = [[cos a, sin a], [-sin a, cos a]]; multiples of 90 degrees use an
    exact pixel permutation so no interpolation error enters.
    """
    reduced = float(angle_deg) % 360.0
    if reduced % 90.0 == 0.0:
        return np.ascontiguousarray(np.rot90(image, k=int(reduced // 90.0)))
    size = image.shape[0]
    center = (size - 1) / 2.0
    matrix = cv2.getRotationMatrix2D((center, center), float(angle_deg), 1.0)
    return cv2.warpAffine(image, matrix, (size, size), flags=cv2.INTER_LINEAR)


def _back_rotate_points(points: np.ndarray, angle_deg: float, center: float) -> np.ndarray:
    """Undoes the image rotation on points given in the rotated frame."""
    co, si = _cos_sin(angle_deg)
    dx = points[:, 0] - center
    dy = points[:, 1] - center
    return np.stack([co * dx - si * dy + center, si * dx + co * dy + center], axis=1)


def consistency_score(
    crop: np.ndarray,
    side: HandSide,
    recon: Reconstructor,
    angles: Sequence[float] = DEFAULT_ANGLES,
) -> float:
    """Mean pairwise joint disagreement across reconstructions of rotated copies.

    The crop is centered on a rotation-safe square canvas, each rotated copy
    is reconstructed, and every joint set is rotated back to the original
    frame. The score is the mean over unordered pairs of copies of the mean
    per-joint L2 distance, normalized by the original crop diagonal; zero
    means perfectly rotation-equivariant.
    """
    crop = np.asarray(crop)
    if crop.ndim not in (2, 3) or crop.shape[0] < 1 or crop.shape[1] < 1:
        raise DataError(f"crop must be a 2-D or 3-D image, got shape {crop.shape}")
    if len(angles) < 2:
        raise DataError("consistency_score needs at least two rotation angles")
    padded, ox, oy = _pad_to_rotation_safe(crop)
    center = (padded.shape[0] - 1) / 2.0
    offset = np.array([ox, oy], dtype=float)

    joint_sets: list[np.ndarray] = []
    for angle in angles:
        rotated = _rotate_image(padded, angle)
        try:
            record = recon(rotated, side)
        except ReconstructionError:
            raise
        except Exception as exc:
            raise ReconstructionError(float(angle), str(exc)) from exc
        joints = np.asarray(record.joints_2d, dtype=float)
        if joints.ndim != 2 or joints.shape[1] != 2:
            raise ReconstructionError(float(angle), f"joints have shape {joints.shape}")
        if not np.isfinite(joints).all():
            raise ReconstructionError(float(angle), "non-finite joints")
        joint_sets.append(_back_rotate_points(joints, float(angle), center) - offset)

    counts = {js.shape[0] for js in joint_sets}
    if len(counts) != 1:
        raise DataError(f"joint count differs across copies: {sorted(counts)}")

    diagonal = math.hypot(crop.shape[1], crop.shape[0])
    total = 0.0
    pairs = 0
    for i in range(len(joint_sets)):
        for j in range(i + 1, len(joint_sets)):
            deltas = joint_sets[i] - joint_sets[j]
            total += float(np.sqrt((deltas**2).sum(axis=1)).mean())
            pairs += 1
    return total / pairs / diagonal


class SerializedReconstructor:
    """Lock-guarded wrapper making any reconstructor safe to share across threads."""

    def __init__(self, recon: Reconstructor):
        self._recon = recon
        self._lock = threading.Lock()

    def __call__(self, crop: np.ndarray, side: HandSide) -> MeshRecord:
        with self._lock:
            return self._recon(crop, side)


# --------------------------------------------------------------------------
# label generation


def make_labels(
    scored: Iterable[tuple[object, float]],
    top_frac: float = 0.3,
    bottom_frac: float = 0.3,
) -> QualityLabelSet:
    """Turns consistency scores into positive/negative/unlabeled assignments.

    Items are sorted ascending by consistency (ties keep input order); the
    first floor(n * top_frac) become POSITIVE (most consistent, hence most
    trustworthy), the last floor(n * bottom_frac) NEGATIVE, the remainder
    UNLABELED. The returned set preserves the input order.
    """
    pairs = [(item, float(score)) for item, score in scored]
    if not pairs:
        raise DataError("make_labels needs at least one scored item")
    if not (0.0 <= top_frac and 0.0 <= bottom_frac and top_frac + bottom_frac <= 1.0):
        raise DataError(
            f"fractions must be non-negative and sum to at most 1, got {top_frac} and {bottom_frac}"
        )
    for _, score in pairs:
        if not math.isfinite(score):
            raise DataError("consistency scores must be finite")

    n = len(pairs)
    n_pos = math.floor(n * top_frac)
    n_neg = math.floor(n * bottom_frac)
    order = sorted(range(n), key=lambda i: pairs[i][1])
    labels = [QualityLabel.UNLABELED] * n
    for i in order[:n_pos]:
        labels[i] = QualityLabel.POSITIVE
    for i in order[n - n_neg :]:
        labels[i] = QualityLabel.NEGATIVE
    return QualityLabelSet(
        tuple(LabeledItem(item, score, labels[i]) for i, (item, score) in enumerate(pairs))
    )


# --------------------------------------------------------------------------
# classifiers and baselines


def _theta_of(item: object) -> np.ndarray:
    theta = getattr(item, "theta", None)
    if theta is None:
        raise DataError(f"labeled item of type {type(item).__name__} has no theta vector")
    return np.asarray(theta, dtype=float)


def _labeled_matrix(labels: QualityLabelSet) -> tuple[np.ndarray, np.ndarray]:
    rows = []
    targets = []
    for it in labels:
        if it.label is QualityLabel.UNLABELED:
            continue
        rows.append(_theta_of(it.item))
        targets.append(1 if it.label is QualityLabel.POSITIVE else 0)
    if not rows:
        raise DataError("no labeled items to train on")
    y = np.asarray(targets, dtype=int)
    if y.min() == y.max():
        raise DataError("training needs at least one positive and one negative item")
    return np.stack(rows), y


class ThetaClassifier:
    """Predicts the probability that a pose vector came from a good reconstruction."""

    def __init__(self, model):
        self._model = model
        classes = list(model.classes_)
        self._positive_column = classes.index(1)

    def probabilities(self, thetas) -> np.ndarray:
        X = np.asarray(thetas, dtype=float)
        if X.ndim == 1:
            X = X[None, :]
        if X.ndim != 2:
            raise DataError(f"theta matrix must be 2-D, got shape {X.shape}")
        return self._model.predict_proba(X)[:, self._positive_column]

    def save(self, path):
        with open(path, "wb") as fh:
            pickle.dump(self._model, fh)

    @classmethod
    def load(cls, path) -> "ThetaClassifier":
        path = Path(path)
        if not path.exists():
            raise DataError(f"classifier checkpoint not found: {path}")
        with open(path, "rb") as fh:
            return cls(pickle.load(fh))


def train_quality_mlp(
    labels: QualityLabelSet,
    seed: int = 0,
    hidden_layer_sizes: tuple[int, int] = (100, 50),
    max_iter: int = 2000,
) -> ThetaClassifier:
    """Fits the quality MLP (hidden sizes 100 and 50, cross-entropy loss)."""
    from sklearn.neural_network import MLPClassifier

    X, y = _labeled_matrix(labels)
    model = MLPClassifier(
        hidden_layer_sizes=hidden_layer_sizes,
        solver="lbfgs",
        random_state=int(seed),
        max_iter=int(max_iter),
    )
    model.fit(X, y)
    return ThetaClassifier(model)


def baseline_nb(labels: QualityLabelSet) -> ThetaClassifier:
    """Gaussian naive Bayes on the same labeled pose vectors."""
    from sklearn.naive_bayes import GaussianNB

    X, y = _labeled_matrix(labels)
    model = GaussianNB()
    model.fit(X, y)
    return ThetaClassifier(model)


class GaussianScorer:
    """Log-likelihood under one full-covariance Gaussian over all pose vectors."""

    def __init__(self, mean: np.ndarray, cov: np.ndarray):
        from scipy.stats import multivariate_normal

        self.mean = mean
        self.cov = cov
        self._dist = multivariate_normal(mean=mean, cov=cov)

    def log_likelihood(self, thetas) -> np.ndarray:
        X = np.asarray(thetas, dtype=float)
        return np.atleast_1d(self._dist.logpdf(X))


def baseline_gaussian(all_theta, regularization: float = 1e-6) -> GaussianScorer:
    """Unsupervised baseline: fit a single Gaussian to every pose vector.

    The covariance gets ``regularization * I`` added so degenerate sample
    covariances stay invertible.
    """
    X = np.asarray(all_theta, dtype=float)
    if X.ndim != 2 or X.shape[0] < 2:
        raise DataError(f"need a 2-D matrix with at least two rows, got shape {X.shape}")
    if not np.isfinite(X).all():
        raise DataError("pose vectors must be finite")
    mean = X.mean(axis=0)
    cov = np.atleast_2d(np.cov(X, rowvar=False)) + regularization * np.eye(X.shape[1])
    return GaussianScorer(mean, cov)


def auroc(scores, labels) -> float:
    """Probability that a random positive outscores a random negative.

    Ties count one half, so the value equals the exhaustive pairwise count
    (the Mann-Whitney statistic computed from midranks).
    """
    from scipy.stats import rankdata

    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels)
    if s.ndim != 1 or y.shape != s.shape:
        raise DataError(f"scores and labels must be 1-D and equal length, got {s.shape} and {y.shape}")
    if s.size == 0 or not np.isfinite(s).all():
        raise DataError("scores must be a non-empty finite vector")
    if not np.isin(y, (0, 1)).all():
        raise DataError("labels must be 0 or 1")
    n_pos = int((y == 1).sum())
    n_neg = int((y == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise DataError("auroc needs both classes present")
    ranks = rankdata(s, method="average")
    return float((ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


# --------------------------------------------------------------------------
# reference reconstructor


class CentroidReconstructor:
    """Deterministic image-statistics reconstructor for pipeline smoke runs.

    Places joints on an intensity-weighted ellipse around the brightness
    centroid and derives the pose vector from a coarse thumbnail. This is a
    placeholder standing in for an external mesh system, useful to exercise
    the scoring/labeling/classifier pipeline end to end.
    """

    def __init__(self, joint_count: int = DEFAULT_JOINT_COUNT, theta_dim: int = DEFAULT_THETA_DIM):
        if joint_count < 1 or theta_dim < 1:
            raise DataError("joint_count and theta_dim must be positive")
        self.joint_count = int(joint_count)
        self.theta_dim = int(theta_dim)

    def __call__(self, crop: np.ndarray, side: HandSide) -> MeshRecord:
        crop = np.asarray(crop)
        if crop.ndim == 3:
            gray = crop.astype(np.float64).mean(axis=2)
        else:
            gray = crop.astype(np.float64)
        h, w = gray.shape
        side = HandSide(side)
        if side is HandSide.LEFT:
            gray = gray[:, ::-1]

        mass = gray + 1e-9
        total = mass.sum()
        ys, xs = np.mgrid[0:h, 0:w]
        cx = float((mass * xs).sum() / total)
        cy = float((mass * ys).sum() / total)
        sx = math.sqrt(float((mass * (xs - cx) ** 2).sum() / total)) + 1e-9
        sy = math.sqrt(float((mass * (ys - cy) ** 2).sum() / total)) + 1e-9

        phases = 2.0 * math.pi * np.arange(self.joint_count) / self.joint_count
        joints = np.stack(
            [cx + 0.5 * sx * np.cos(phases), cy + 0.5 * sy * np.sin(phases)], axis=1
        )
        if side is HandSide.LEFT:
            joints[:, 0] = (w - 1) - joints[:, 0]

        cols = max(1, round(math.sqrt(self.theta_dim)))
        rows = max(1, math.ceil(self.theta_dim / cols))
        thumb = cv2.resize(gray, (cols, rows), interpolation=cv2.INTER_AREA).ravel()
        thumb = thumb[: self.theta_dim]
        if thumb.size < self.theta_dim:
            thumb = np.pad(thumb, (0, self.theta_dim - thumb.size))
        theta = (thumb - thumb.mean()) / (thumb.std() + 1e-9)
        return MeshRecord(theta=theta, joints_2d=joints, side=side)


# --------------------------------------------------------------------------
# scored-record files


@dataclass(frozen=True)
class ScoredRecord:
    """One scored detection: where it was, its pose vector, and its labels."""

    image_id: str
    box: BBox
    side: HandSide
    consistency: float
    theta: tuple[float, ...]
    label: QualityLabel = QualityLabel.UNLABELED

    def __post_init__(self):
        if not math.isfinite(self.consistency) or self.consistency < 0.0:
            raise DataError(f"consistency must be finite and non-negative, got {self.consistency}")
        theta = tuple(float(v) for v in self.theta)
        if not theta or not all(math.isfinite(v) for v in theta):
            raise DataError("theta must be a non-empty finite vector")
        object.__setattr__(self, "theta", theta)
        object.__setattr__(self, "side", HandSide(self.side))
        object.__setattr__(self, "label", QualityLabel(self.label))


def save_scored_records(records: Iterable[ScoredRecord], path) -> None:
    """Writes scored records as one JSON object per line."""
    lines = []
    for rec in records:
        lines.append(
            json.dumps(
                {
                    "image_id": rec.image_id,
                    "box": list(rec.box.as_list()),
                    "side": rec.side.value,
                    "consistency": rec.consistency,
                    "theta": list(rec.theta),
                    "label": rec.label.value,
                },
                sort_keys=True,
            )
        )
    Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def load_scored_records(path) -> list[ScoredRecord]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"scored-record file not found: {path}")
    records = []
    for line_no, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            raw = json.loads(line)
        except json.JSONDecodeError as err:
            raise AnnotationFormatError(f"invalid JSON: {err}", line=line_no) from err
        try:
            records.append(
                ScoredRecord(
                    image_id=str(raw["image_id"]),
                    box=BBox.from_list(raw["box"]),
                    side=HandSide(raw["side"]),
                    consistency=float(raw["consistency"]),
                    theta=tuple(float(v) for v in raw["theta"]),
                    label=QualityLabel(raw["label"]),
                )
            )
        except KeyError as err:
            raise AnnotationFormatError(f"missing key {err}", line=line_no) from err
        except (DataError, ValueError, TypeError) as err:
            raise AnnotationFormatError(str(err), line=line_no) from err
    return records
