"""Hot kernels with backend selection.

The compiled Cython extension is used when available; setting the environment
variable ``HANDCONTACT_PURE_PY=1`` (before first import) forces the numpy
fallback. ``benchmarks/bench_kernels.py`` compares the two.
"""

from __future__ import annotations

import os

from . import numpy_ops

if os.environ.get("HANDCONTACT_PURE_PY"):
    _impl = numpy_ops
else:
    try:
        from . import _fastops as _impl  # type: ignore[attr-defined]
    except ImportError:
        _impl = numpy_ops

BACKEND: str = _impl.BACKEND
pairwise_iou = _impl.pairwise_iou
greedy_match = _impl.greedy_match
pairwise_sqdist = _impl.pairwise_sqdist

__all__ = ["BACKEND", "pairwise_iou", "greedy_match", "pairwise_sqdist"]
