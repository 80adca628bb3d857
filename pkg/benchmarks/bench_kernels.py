"""Timing comparison: compiled box kernels vs. the pure-numpy fallback.

Runs pairwise_iou, greedy_match, and pairwise_sqdist on random inputs with
both backends, checks they agree, and prints per-kernel timings.

    python3 benchmarks/bench_kernels.py --size 1000 --repeats 5
"""

from __future__ import annotations

import argparse
import timeit

import numpy as np

from handcontact._kernels import numpy_ops

try:
    from handcontact._kernels import _fastops
except ImportError:
    _fastops = None


def random_boxes(rng: np.random.RandomState, n: int, span: float = 500.0) -> np.ndarray:
    x1 = rng.uniform(0, span, n)
    y1 = rng.uniform(0, span, n)
    w = rng.uniform(1, 80, n)
    h = rng.uniform(1, 80, n)
    return np.stack([x1, y1, x1 + w, y1 + h], axis=1)


def bench(label: str, fn, args, repeats: int) -> float:
    best = min(timeit.repeat(lambda: fn(*args), number=1, repeat=repeats))
    print(f"  {label:<28s} {best * 1e3:9.3f} ms")
    return best


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--size", type=int, default=1000, help="boxes per side")
    parser.add_argument("--repeats", type=int, default=5, help="timing repeats")
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    if _fastops is None:
        print("compiled backend unavailable; only the numpy fallback can run")
        return 1

    rng = np.random.RandomState(args.seed)
    boxes_a = random_boxes(rng, args.size)
    boxes_b = random_boxes(rng, args.size)
    points = rng.standard_normal((args.size, 45))
    centers = rng.standard_normal((10, 45))

    iou_fast = _fastops.pairwise_iou(boxes_a, boxes_b)
    iou_ref = numpy_ops.pairwise_iou(boxes_a, boxes_b)
    assert np.allclose(iou_fast, iou_ref, atol=1e-12), "IoU backends disagree"
    predicate = rng.rand(args.size, args.size) < 0.7
    match_fast = _fastops.greedy_match(iou_fast, predicate, 0.5)
    match_ref = numpy_ops.greedy_match(iou_ref, predicate, 0.5)
    assert np.array_equal(match_fast, match_ref), "match backends disagree"
    sq_fast = _fastops.pairwise_sqdist(points, centers)
    sq_ref = numpy_ops.pairwise_sqdist(points, centers)
    assert np.allclose(sq_fast, sq_ref, atol=1e-9), "sqdist backends disagree"
    print(f"backends agree on {args.size}x{args.size} inputs\n")

    results = {}
    for name, impl in (("cython", _fastops), ("numpy", numpy_ops)):
        print(f"{name} backend:")
        results[name, "pairwise_iou"] = bench(
            "pairwise_iou", impl.pairwise_iou, (boxes_a, boxes_b), args.repeats)
        results[name, "greedy_match"] = bench(
            "greedy_match", impl.greedy_match, (iou_ref, predicate, 0.5), args.repeats)
        results[name, "pairwise_sqdist"] = bench(
            "pairwise_sqdist", impl.pairwise_sqdist, (points, centers), args.repeats)
        print()

    print("speedup (numpy time / cython time):")
    for kernel in ("pairwise_iou", "greedy_match", "pairwise_sqdist"):
        ratio = results["numpy", kernel] / results["cython", kernel]
        print(f"  {kernel:<28s} {ratio:6.2f}x")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
