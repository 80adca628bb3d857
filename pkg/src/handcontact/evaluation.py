"""Average precision over compound true-positive criteria.

A detection can be scored as a plain box hit (HAND, OBJ) or additionally
required to carry the correct side, contact state, and object link
(H_SIDE, H_STATE, H_O, ALL). Matching is greedy by descending score: each
detection claims the highest-IoU unconsumed ground truth, and a detection
that overlaps enough but fails the criterion predicate counts as a false
positive without consuming the ground truth. AP is all-point interpolated
(area under the precision envelope).
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import _kernels
from .association import ImageParse
from .data_model import LINKABLE_STATES, BBox, ImageRecord
from .errors import DataError

__all__ = [
    "EvalCriterion",
    "PRCurve",
    "iou",
    "match_detections",
    "average_precision",
    "pr_curve",
    "evaluate_state",
    "pose_hand_criterion",
    "center_in_box_criterion",
    "scale_binned_ap",
    "format_report",
    "write_pr_csv",
]


class EvalCriterion(Enum):
    """What a detection must get right to count as a true positive."""

    HAND = "hand"
    OBJ = "obj"
    H_SIDE = "h_side"
    H_STATE = "h_state"
    H_O = "h_o"
    ALL = "all"


ALL_CRITERIA: tuple[EvalCriterion, ...] = tuple(EvalCriterion)


@dataclass(frozen=True)
class PRCurve:
    """Ranked precision/recall points with the summary AP."""

    precision: tuple[float, ...]
    recall: tuple[float, ...]
    ap: float
    n_pos: int

    def __post_init__(self) -> None:
        if len(self.precision) != len(self.recall):
            raise DataError("precision and recall must have equal length")
        if any(b < a for a, b in zip(self.recall, self.recall[1:])):
            raise DataError("recall must be non-decreasing along rank")
        if not 0.0 <= self.ap <= 1.0:
            raise DataError(f"ap must lie in [0, 1], got {self.ap}")


def iou(a: BBox, b: BBox) -> float:
    """Intersection over union of two boxes; 0 when disjoint."""
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def _boxes_array(boxes: Sequence[BBox]) -> np.ndarray:
    if not boxes:
        return np.zeros((0, 4), dtype=np.float64)
    return np.array([b.as_list() for b in boxes], dtype=np.float64)


def match_detections(
    boxes: Sequence[BBox],
    scores: Sequence[float],
    gt_boxes: Sequence[BBox],
    iou_thresh: float = 0.5,
    predicate: np.ndarray | Callable[[int, int], bool] | None = None,
) -> np.ndarray:
    """Greedy TP/FP flags, returned in descending-score order (stable ties).

    ``predicate`` is an optional extra correctness test per (detection,
    ground truth) pair, given either as a boolean matrix indexed in the
    input order or as a callable on (det_index, gt_index). A detection whose
    best unconsumed ground truth passes the IoU threshold but fails the
    predicate is a false positive and leaves the ground truth available.
    """
    if len(boxes) != len(scores):
        raise DataError("boxes and scores must have equal length")
    n, m = len(boxes), len(gt_boxes)
    if predicate is None:
        pred_matrix = np.ones((n, m), dtype=bool)
    elif callable(predicate):
        pred_matrix = np.array([[bool(predicate(i, j)) for j in range(m)] for i in range(n)], dtype=bool)
        pred_matrix = pred_matrix.reshape(n, m)
    else:
        pred_matrix = np.asarray(predicate, dtype=bool)
        if pred_matrix.shape != (n, m):
            raise DataError(f"predicate matrix must have shape ({n}, {m})")
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")
    iou_matrix = _kernels.pairwise_iou(_boxes_array(boxes)[order], _boxes_array(gt_boxes))
    return _kernels.greedy_match(iou_matrix, pred_matrix[order], iou_thresh)


def average_precision(flags: Sequence[int], n_pos: int) -> float:
    """All-point interpolated AP from ranked TP/FP flags.

    With no positives, an empty detection list scores 1.0 and anything else
    scores 0.0.
    """
    if n_pos < 0:
        raise DataError("n_pos must be non-negative")
    flags_arr = np.asarray(flags, dtype=np.float64)
    if n_pos == 0:
        return 1.0 if flags_arr.size == 0 else 0.0
    if flags_arr.size == 0:
        return 0.0
    tp = np.cumsum(flags_arr)
    precision = tp / np.arange(1, flags_arr.size + 1)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    return float(envelope[flags_arr > 0].sum() / n_pos)


def pr_curve(flags: Sequence[int], n_pos: int) -> PRCurve:
    """Precision/recall at every rank plus the all-point AP."""
    flags_arr = np.asarray(flags, dtype=np.float64)
    ap = average_precision(flags_arr, n_pos)
    if flags_arr.size == 0:
        return PRCurve(precision=(), recall=(), ap=ap, n_pos=n_pos)
    tp = np.cumsum(flags_arr)
    precision = tp / np.arange(1, flags_arr.size + 1)
    recall = tp / n_pos if n_pos > 0 else np.zeros_like(tp)
    return PRCurve(
        precision=tuple(float(p) for p in precision),
        recall=tuple(float(r) for r in recall),
        ap=ap,
        n_pos=n_pos,
    )


def _link_boxes(parse: ImageParse) -> tuple[np.ndarray, np.ndarray]:
    """Per-hand linked object box (dummy row when unlinked) and a link mask."""
    has_link = np.array([h.object_link is not None for h in parse.hands], dtype=bool)
    rows = np.zeros((len(parse.hands), 4), dtype=np.float64)
    rows[:, 2:] = 1.0
    for k, hand in enumerate(parse.hands):
        if hand.object_link is not None:
            rows[k] = parse.objects[hand.object_link].box.as_list()
    return rows, has_link


def _gt_link_boxes(record: ImageRecord) -> tuple[np.ndarray, np.ndarray]:
    linkable = np.array([a.state in LINKABLE_STATES for a in record.hands], dtype=bool)
    rows = np.zeros((len(record.hands), 4), dtype=np.float64)
    rows[:, 2:] = 1.0
    for k, ann in enumerate(record.hands):
        if linkable[k]:
            rows[k] = record.objects[ann.object_index].as_list()
    return rows, linkable


def _hand_predicate(
    parse: ImageParse, record: ImageRecord, criterion: EvalCriterion, iou_thresh: float
) -> np.ndarray:
    n, m = len(parse.hands), len(record.hands)
    ok = np.ones((n, m), dtype=bool)
    if criterion in (EvalCriterion.H_SIDE, EvalCriterion.ALL):
        det_side = np.array([int(h.side) for h in parse.hands], dtype=np.int64).reshape(n)
        gt_side = np.array([int(a.side) for a in record.hands], dtype=np.int64).reshape(m)
        ok &= det_side[:, None] == gt_side[None, :]
    if criterion in (EvalCriterion.H_STATE, EvalCriterion.ALL):
        det_state = np.array([int(h.state) for h in parse.hands], dtype=np.int64).reshape(n)
        gt_state = np.array([int(a.state) for a in record.hands], dtype=np.int64).reshape(m)
        ok &= det_state[:, None] == gt_state[None, :]
    if criterion in (EvalCriterion.H_O, EvalCriterion.ALL):
        det_boxes, det_linked = _link_boxes(parse)
        gt_boxes, gt_linkable = _gt_link_boxes(record)
        link_iou = _kernels.pairwise_iou(det_boxes, gt_boxes)
        link_hit = det_linked[:, None] & (link_iou >= iou_thresh)
        # ground truths that cannot carry a link demand an unlinked prediction
        ok &= np.where(gt_linkable[None, :], link_hit, ~det_linked[:, None])
    return ok


def _image_flags(
    parse: ImageParse,
    record: ImageRecord,
    criterion: EvalCriterion,
    iou_thresh: float,
    score_thresh: float,
) -> tuple[np.ndarray, np.ndarray, int]:
    """Flags and sorted scores for one image; also that image's GT count."""
    if criterion is EvalCriterion.OBJ:
        boxes = [obj.box for obj in parse.objects]
        scores = [obj.score for obj in parse.objects]
        gt_boxes = list(record.objects)
        predicate = None
    else:
        boxes = [hand.box for hand in parse.hands]
        scores = [hand.score for hand in parse.hands]
        gt_boxes = [ann.box for ann in record.hands]
        predicate = _hand_predicate(parse, record, criterion, iou_thresh)
    keep = [k for k, s in enumerate(scores) if s >= score_thresh]
    if len(keep) != len(scores):
        boxes = [boxes[k] for k in keep]
        scores = [scores[k] for k in keep]
        if predicate is not None:
            predicate = predicate[keep]
    flags = match_detections(boxes, scores, gt_boxes, iou_thresh, predicate)
    sorted_scores = np.sort(np.asarray(scores, dtype=np.float64), kind="stable")[::-1]
    return sorted_scores, flags, len(gt_boxes)


def _pair_by_image(
    parses: Sequence[ImageParse], gt: Sequence[ImageRecord]
) -> list[tuple[ImageParse, ImageRecord]]:
    by_id = {p.image_id: p for p in parses}
    if len(by_id) != len(parses):
        raise DataError("duplicate image_id among parses")
    missing = [r.image_id for r in gt if r.image_id not in by_id]
    if missing:
        raise DataError(f"no parse for image_id(s): {missing[:5]}")
    extra = set(by_id) - {r.image_id for r in gt}
    if extra:
        raise DataError(f"parse for unknown image_id(s): {sorted(extra)[:5]}")
    return [(by_id[r.image_id], r) for r in gt]


def evaluate_state(
    parses: Sequence[ImageParse],
    gt: Sequence[ImageRecord],
    criteria: Sequence[EvalCriterion] = ALL_CRITERIA,
    iou_thresh: float = 0.5,
    score_thresholds: Mapping[EvalCriterion, float] | float | None = None,
) -> dict[EvalCriterion, PRCurve]:
    """PR curve (with AP) per criterion over a parsed image set.

    Hand criteria rank detections by hand score; OBJ ranks by object score.
    Link correctness (H_O, ALL) requires the predicted hand's linked object
    box to reach the IoU threshold against the ground-truth hand's object
    box; ground-truth hands in a non-linkable state require the prediction
    to carry no link. ``score_thresholds`` optionally drops detections below
    a per-criterion score before matching (default keeps everything).
    """
    pairs = _pair_by_image(parses, gt)
    if isinstance(score_thresholds, (int, float)):
        thresholds = {c: float(score_thresholds) for c in criteria}
    else:
        thresholds = {c: 0.0 for c in criteria}
        if score_thresholds:
            thresholds.update(score_thresholds)
    results: dict[EvalCriterion, PRCurve] = {}
    for criterion in criteria:
        all_scores, all_flags, n_pos = [], [], 0
        for parse_obj, record in pairs:
            scores, flags, gt_count = _image_flags(
                parse_obj, record, criterion, iou_thresh, thresholds[criterion]
            )
            all_scores.append(scores)
            all_flags.append(flags)
            n_pos += gt_count
        scores_cat = np.concatenate(all_scores) if all_scores else np.zeros(0)
        flags_cat = np.concatenate(all_flags) if all_flags else np.zeros(0, dtype=np.uint8)
        order = np.argsort(-scores_cat, kind="stable")
        results[criterion] = pr_curve(flags_cat[order], n_pos)
    return results


def pose_hand_criterion(
    wrist: tuple[float, float], elbow: tuple[float, float], gt_box: BBox
) -> bool:
    """Keypoint-based hit test: extrapolate a hand center from wrist and
    elbow as w + 0.2(w - e) and ask whether it falls inside the ground-truth
    box grown to twice the width and height about its center (closed)."""
    wx, wy = wrist
    ex, ey = elbow
    if not all(math.isfinite(v) for v in (wx, wy, ex, ey)):
        raise DataError("wrist and elbow must be finite points")
    px = wx + 0.2 * (wx - ex)
    py = wy + 0.2 * (wy - ey)
    cx, cy = gt_box.center()
    return (cx - gt_box.width <= px <= cx + gt_box.width
            and cy - gt_box.height <= py <= cy + gt_box.height)


def center_in_box_criterion(det_box: BBox, gt_box: BBox) -> bool:
    """Hit test for detectors compared by center containment (closed box)."""
    cx, cy = det_box.center()
    return gt_box.x1 <= cx <= gt_box.x2 and gt_box.y1 <= cy <= gt_box.y2


def _image_hand_size(record: ImageRecord) -> float:
    areas = [ann.box.area for ann in record.hands]
    return math.sqrt(sum(areas) / len(areas) / (record.width * record.height))


def scale_binned_ap(
    parses: Sequence[ImageParse],
    gt: Sequence[ImageRecord],
    bin_edges: Sequence[float],
    criterion: EvalCriterion = EvalCriterion.HAND,
    iou_thresh: float = 0.5,
) -> dict[tuple[float, float], PRCurve]:
    """AP within image bins of average hand size.

    An image's size is sqrt(mean over its hands of box area / image area).
    Bins are half-open [lo, hi) with the final bin closed at the top edge.
    Images without ground-truth hands have no size and are skipped; empty
    bins are absent from the result.
    """
    edges = [float(e) for e in bin_edges]
    if len(edges) < 2 or any(b <= a for a, b in zip(edges, edges[1:])):
        raise DataError("bin_edges must be strictly increasing with at least two entries")
    pairs = _pair_by_image(parses, gt)
    binned: dict[int, list[tuple[ImageParse, ImageRecord]]] = {}
    for parse_obj, record in pairs:
        if not record.hands:
            continue
        size = _image_hand_size(record)
        idx = int(np.searchsorted(edges, size, side="right")) - 1
        if size == edges[-1]:
            idx = len(edges) - 2
        if 0 <= idx < len(edges) - 1:
            binned.setdefault(idx, []).append((parse_obj, record))
    results: dict[tuple[float, float], PRCurve] = {}
    for idx in sorted(binned):
        sub_parses = [p for p, _ in binned[idx]]
        sub_gt = [r for _, r in binned[idx]]
        curves = evaluate_state(sub_parses, sub_gt, criteria=(criterion,), iou_thresh=iou_thresh)
        results[(edges[idx], edges[idx + 1])] = curves[criterion]
    return results


def format_report(
    results: Mapping[EvalCriterion, PRCurve],
    scale_results: Mapping[tuple[float, float], PRCurve] | None = None,
) -> str:
    """Human-readable summary of per-criterion and per-bin AP."""
    lines = ["average precision"]
    for criterion, curve in results.items():
        lines.append(f"  {criterion.value:<8s} {curve.ap:.4f}  (positives: {curve.n_pos})")
    if scale_results is not None:
        lines.append("hand-size bins")
        if not scale_results:
            lines.append("  (no images with hands)")
        for (lo, hi), curve in scale_results.items():
            lines.append(f"  [{lo:.3f}, {hi:.3f})  {curve.ap:.4f}  (positives: {curve.n_pos})")
    return "\n".join(lines) + "\n"


def write_pr_csv(results: Mapping[EvalCriterion, PRCurve], path: str | Path) -> None:
    """One row per ranked point: criterion, rank, precision, recall, ap."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["criterion", "rank", "precision", "recall", "ap", "n_pos"])
        for criterion, curve in results.items():
            for rank, (prec, rec) in enumerate(zip(curve.precision, curve.recall), start=1):
                writer.writerow([criterion.value, rank, repr(prec), repr(rec), repr(curve.ap), curve.n_pos])
