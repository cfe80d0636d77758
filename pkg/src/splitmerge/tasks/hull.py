"""Planar convex hull: instance generator, exact oracle, exact-match metric."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["HullInstance", "hull_oracle", "gen_hull", "hull_accuracy", "canonical_rotation"]


@dataclass
class HullInstance:
    points: np.ndarray          # (n, 2) in the unit square
    hull: list                  # extremal indices, CCW from the lowest-leftmost vertex

    @property
    def n(self) -> int:
        return len(self.points)


def _cross(o, a, b):
    return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])


def hull_oracle(points, return_degenerate: bool = False):
    """Strictly convex hull indices, CCW starting at the lowest-then-leftmost
    vertex (collinear boundary points are excluded).

    All-collinear inputs return the two extreme points, flagged degenerate
    when ``return_degenerate`` is set.
    """
    pts = np.asarray(points, dtype=np.float64)
    n = len(pts)
    if n < 3:
        raise ValueError("need at least 3 points")
    order = np.lexsort((pts[:, 1], pts[:, 0]))

    def half(seq):
        out = []
        for i in seq:
            while len(out) >= 2 and _cross(pts[out[-2]], pts[out[-1]], pts[i]) <= 0:
                out.pop()
            out.append(i)
        return out

    lower = half(order)
    upper = half(order[::-1])
    hull = lower[:-1] + upper[:-1]
    degenerate = len(hull) < 3
    if degenerate:
        hull = [int(order[0]), int(order[-1])]
    else:
        hull = canonical_rotation([int(i) for i in hull], pts)
    if return_degenerate:
        return hull, degenerate
    return hull


def canonical_rotation(cycle, points) -> list:
    """Rotate a cyclic index sequence to start at the lowest-then-leftmost vertex."""
    pts = np.asarray(points, dtype=np.float64)
    keys = [(pts[i][1], pts[i][0]) for i in cycle]
    start = keys.index(min(keys))
    return list(cycle[start:]) + list(cycle[:start])


def gen_hull(n_range, count: int, rng: np.random.Generator) -> list:
    """Uniform unit-square instances with the oracle hull embedded."""
    lo, hi = int(n_range[0]), int(n_range[1])
    if lo < 3:
        raise ValueError("hull instances need n >= 3")
    out = []
    while len(out) < count:
        n = int(rng.integers(lo, hi + 1))
        pts = rng.uniform(size=(n, 2))
        hull, degenerate = hull_oracle(pts, return_degenerate=True)
        if degenerate:
            continue   # measure-zero for uniform points; resample
        out.append(HullInstance(points=pts, hull=hull))
    return out


def hull_accuracy(predicted, truth) -> int:
    """1 iff the sequences match as cyclic sequences (same orientation)."""
    predicted, truth = list(predicted), list(truth)
    if len(predicted) != len(truth) or not truth:
        return 0
    doubled = truth + truth
    for r in range(len(truth)):
        if doubled[r:r + len(truth)] == predicted:
            return 1
    return 0
