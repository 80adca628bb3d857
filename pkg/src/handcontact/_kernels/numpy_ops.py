"""Pure-numpy implementations of the hot box/metric kernels.

These are the reference semantics; the compiled extension in ``_fastops.pyx``
must agree with them exactly on IoU values and match flags, and to float
rounding on distance reductions.
"""

from __future__ import annotations

import numpy as np

BACKEND = "numpy"


def pairwise_iou(boxes_a: np.ndarray, boxes_b: np.ndarray) -> np.ndarray:
    """IoU matrix between two box arrays.

    Boxes are (N, 4) float64 arrays in (x1, y1, x2, y2) order with x1 <= x2
    and y1 <= y2. Returns an (N, M) float64 matrix; disjoint pairs give 0.
    """
    a = np.asarray(boxes_a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(boxes_b, dtype=np.float64).reshape(-1, 4)
    ix1 = np.maximum(a[:, None, 0], b[None, :, 0])
    iy1 = np.maximum(a[:, None, 1], b[None, :, 1])
    ix2 = np.minimum(a[:, None, 2], b[None, :, 2])
    iy2 = np.minimum(a[:, None, 3], b[None, :, 3])
    iw = np.maximum(ix2 - ix1, 0.0)
    ih = np.maximum(iy2 - iy1, 0.0)
    inter = iw * ih
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0.0)
    return out


def greedy_match(iou: np.ndarray, predicate: np.ndarray, iou_thresh: float) -> np.ndarray:
    """Greedy detection-to-ground-truth matching flags.

    Rows of ``iou`` are detections already ranked by descending score, columns
    are ground-truth boxes. Each detection picks the highest-IoU *unconsumed*
    ground truth (ties -> lowest index). If that IoU clears ``iou_thresh`` and
    ``predicate[det, gt]`` holds, the detection is a true positive and the
    ground truth is consumed; if the predicate fails, the detection is a false
    positive and the ground truth stays available for later detections.

    Returns an (N,) uint8 array with 1 for TP and 0 for FP.
    """
    iou = np.asarray(iou, dtype=np.float64)
    pred = np.asarray(predicate, dtype=bool)
    n_det, n_gt = iou.shape
    flags = np.zeros(n_det, dtype=np.uint8)
    consumed = np.zeros(n_gt, dtype=bool)
    for d in range(n_det):
        best = -1
        best_iou = 0.0
        for g in range(n_gt):
            if consumed[g]:
                continue
            v = iou[d, g]
            if v > best_iou:
                best_iou = v
                best = g
        if best >= 0 and best_iou >= iou_thresh and pred[d, best]:
            flags[d] = 1
            consumed[best] = True
    return flags


def pairwise_sqdist(x: np.ndarray, centers: np.ndarray) -> np.ndarray:
    """Squared Euclidean distances between rows of x (N, D) and centers (K, D)."""
    x = np.asarray(x, dtype=np.float64)
    c = np.asarray(centers, dtype=np.float64)
    diff = x[:, None, :] - c[None, :, :]
    return np.einsum("nkd,nkd->nk", diff, diff)
