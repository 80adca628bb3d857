# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled box/metric kernels. Semantics mirror ``numpy_ops`` exactly."""

import numpy as np

cimport numpy as cnp

cnp.import_array()

BACKEND = "cython"


def pairwise_iou(boxes_a, boxes_b):
    """IoU matrix between (N, 4) and (M, 4) float64 box arrays."""
    cdef double[:, ::1] a = np.ascontiguousarray(boxes_a, dtype=np.float64).reshape(-1, 4)
    cdef double[:, ::1] b = np.ascontiguousarray(boxes_b, dtype=np.float64).reshape(-1, 4)
    cdef Py_ssize_t n = a.shape[0], m = b.shape[0]
    out_arr = np.zeros((n, m), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t i, j
    cdef double ix1, iy1, ix2, iy2, iw, ih, inter, area_a, area_b, union
    for i in range(n):
        area_a = (a[i, 2] - a[i, 0]) * (a[i, 3] - a[i, 1])
        for j in range(m):
            ix1 = max(a[i, 0], b[j, 0])
            iy1 = max(a[i, 1], b[j, 1])
            ix2 = min(a[i, 2], b[j, 2])
            iy2 = min(a[i, 3], b[j, 3])
            iw = ix2 - ix1
            ih = iy2 - iy1
            if iw <= 0.0 or ih <= 0.0:
                continue
            inter = iw * ih
            area_b = (b[j, 2] - b[j, 0]) * (b[j, 3] - b[j, 1])
            union = area_a + area_b - inter
            if union > 0.0:
                out[i, j] = inter / union
    return out_arr


def greedy_match(iou, predicate, double iou_thresh):
    """Greedy ranked matching; see numpy_ops.greedy_match for the contract."""
    cdef double[:, ::1] m = np.ascontiguousarray(iou, dtype=np.float64)
    cdef cnp.uint8_t[:, ::1] pred = np.ascontiguousarray(predicate, dtype=np.uint8)
    cdef Py_ssize_t n_det = m.shape[0], n_gt = m.shape[1]
    flags_arr = np.zeros(n_det, dtype=np.uint8)
    cdef cnp.uint8_t[::1] flags = flags_arr
    consumed_arr = np.zeros(n_gt, dtype=np.uint8)
    cdef cnp.uint8_t[::1] consumed = consumed_arr
    cdef Py_ssize_t d, g, best
    cdef double best_iou, v
    for d in range(n_det):
        best = -1
        best_iou = 0.0
        for g in range(n_gt):
            if consumed[g]:
                continue
            v = m[d, g]
            if v > best_iou:
                best_iou = v
                best = g
        if best >= 0 and best_iou >= iou_thresh and pred[d, best]:
            flags[d] = 1
            consumed[best] = 1
    return flags_arr


def pairwise_sqdist(x, centers):
    """Squared Euclidean distances between rows of (N, D) and (K, D) arrays."""
    cdef double[:, ::1] xv = np.ascontiguousarray(x, dtype=np.float64)
    cdef double[:, ::1] cv = np.ascontiguousarray(centers, dtype=np.float64)
    cdef Py_ssize_t n = xv.shape[0], k = cv.shape[0], dim = xv.shape[1]
    out_arr = np.zeros((n, k), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t i, j, d
    cdef double acc, diff
    for i in range(n):
        for j in range(k):
            acc = 0.0
            for d in range(dim):
                diff = xv[i, d] - cv[j, d]
                acc += diff * diff
            out[i, j] = acc
    return out_arr
