"""Euclidean TSP: exact small-n solver, 2-opt heuristic, beam-search tour
extraction from edge scores, and tour metrics."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "TspInstance", "gen_tsp", "dist_matrix", "held_karp", "nearest_neighbor",
    "two_opt", "tsp_oracle", "leaf_tour_solver", "beam_search_tour",
    "tour_cost", "ratio_metric", "tour_adjacency", "D_MAX",
]

D_MAX = float(np.sqrt(2.0))   # unit-square diameter; keeps similarity weights nonnegative
HELD_KARP_LIMIT = 12


@dataclass
class TspInstance:
    points: np.ndarray
    tour: list                  # ground-truth cycle (index order, implicit return)
    tour_length: float
    exact: bool                 # Held-Karp (True) or 2-opt approximate (False)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)

    @property
    def n(self) -> int:
        return len(self.points)

    @property
    def adjacency(self) -> np.ndarray:
        return D_MAX - dist_matrix(self.points)


def dist_matrix(points) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    return np.sqrt(((pts[:, None, :] - pts[None, :, :]) ** 2).sum(-1))


def tour_cost(points, tour) -> float:
    pts = np.asarray(points, dtype=np.float64)
    tour = list(tour)
    return float(sum(np.linalg.norm(pts[tour[i]] - pts[tour[(i + 1) % len(tour)]])
                     for i in range(len(tour))))


def _cycle_cost(d, tour):
    idx = np.asarray(tour)
    return float(d[idx, np.roll(idx, -1)].sum())


def held_karp(d: np.ndarray):
    """Exact minimum tour via the O(n^2 2^n) subset dynamic program."""
    n = d.shape[0]
    full = 1 << n
    INF = np.inf
    dp = np.full((full, n), INF)
    parent = np.full((full, n), -1, dtype=np.int32)
    dp[1, 0] = 0.0
    for mask in range(1, full):
        if not mask & 1:
            continue
        for j in range(1, n):
            if not mask & (1 << j):
                continue
            pmask = mask ^ (1 << j)
            if pmask == 0:
                continue
            costs = dp[pmask] + d[:, j]
            costs[j] = INF
            k = int(np.argmin(costs))
            if costs[k] < dp[mask, j]:
                dp[mask, j] = costs[k]
                parent[mask, j] = k
    final = dp[full - 1] + d[:, 0]
    final[0] = INF
    j = int(np.argmin(final))
    best = float(final[j])
    tour = []
    mask = full - 1
    while j != -1:
        tour.append(j)
        j, mask = int(parent[mask, j]), mask ^ (1 << j)
    tour.reverse()
    assert tour[0] == 0 and len(tour) == n
    return tour, best


def nearest_neighbor(d: np.ndarray, start: int = 0):
    n = d.shape[0]
    tour = [start]
    left = set(range(n)) - {start}
    while left:
        cur = tour[-1]
        nxt = min(left, key=lambda j: (d[cur, j], j))
        tour.append(nxt)
        left.remove(nxt)
    return tour


def two_opt(d: np.ndarray, tour):
    """Best-improvement 2-opt until no move helps; never worsens its start."""
    tour = list(tour)
    n = len(tour)
    improved = True
    while improved:
        improved = False
        idx = np.asarray(tour)
        nxt = np.roll(idx, -1)
        # delta of reversing segment (i+1..j): d[a,c]+d[b,dd]-d[a,b]-d[c,dd]
        best_delta, best_move = -1e-12, None
        for i in range(n - 1):
            a, b = idx[i], nxt[i]
            j = np.arange(i + 1, n)
            c, dd = idx[j], nxt[j]
            delta = d[a, c] + d[b, dd] - d[a, b] - d[c, dd]
            m = int(np.argmin(delta))
            if delta[m] < best_delta:
                best_delta, best_move = float(delta[m]), (i, i + 1 + m)
        if best_move is not None:
            i, j = best_move
            tour[i + 1:j + 1] = reversed(tour[i + 1:j + 1])
            improved = True
    return tour


def tsp_oracle(points, restarts: int = 20):
    """Ground-truth tour: Held-Karp for small n, multi-start 2-opt beyond.

    Returns (tour, length, exact).
    """
    pts = np.asarray(points, dtype=np.float64)
    n = len(pts)
    if n < 3:
        raise ValueError("need at least 3 points")
    d = dist_matrix(pts)
    if n <= HELD_KARP_LIMIT:
        tour, best = held_karp(d)
        return tour, best, True
    starts = [i * n // restarts for i in range(min(restarts, n))]
    best_tour, best = None, np.inf
    for s in sorted(set(starts)):
        t = two_opt(d, nearest_neighbor(d, s))
        c = _cycle_cost(d, t)
        if c < best:
            best, best_tour = c, t
    return _canonical_cycle(best_tour), best, False


def leaf_tour_solver(points):
    """Fast partial-solution tour for episode leaves (NN + one 2-opt pass set)."""
    pts = np.asarray(points, dtype=np.float64)
    n = len(pts)
    if n == 1:
        return [0]
    if n == 2:
        return [0, 1]
    d = dist_matrix(pts)
    return two_opt(d, nearest_neighbor(d, 0))


def _canonical_cycle(tour):
    """Rotate to start at node 0 (direction preserved)."""
    tour = list(tour)
    z = tour.index(0)
    return tour[z:] + tour[:z]


def gen_tsp(n: int, count: int, rng: np.random.Generator, restarts: int = 20) -> list:
    out = []
    for _ in range(count):
        pts = rng.uniform(size=(n, 2))
        tour, length, exact = tsp_oracle(pts, restarts=restarts)
        out.append(TspInstance(points=pts, tour=tour, tour_length=length, exact=exact))
    return out


def tour_adjacency(n: int, tour) -> np.ndarray:
    adj = np.zeros((n, n))
    tour = list(tour)
    for i in range(len(tour)):
        a, b = tour[i], tour[(i + 1) % len(tour)]
        adj[a, b] = adj[b, a] = 1.0
    return adj


def beam_search_tour(scores: np.ndarray, beam_width: int = 40):
    """Maximize the total edge score of a Hamiltonian cycle by beam search.

    Partial paths start at node 0, extend to unvisited nodes keeping the top
    ``beam_width`` by accumulated score, and close back to 0 at the end.
    """
    scores = np.asarray(scores, dtype=np.float64)
    n = scores.shape[0]
    if n < 3:
        raise ValueError("need at least 3 nodes")
    if not np.allclose(scores, scores.T, atol=1e-9):
        raise ValueError("edge scores must be symmetric")
    beams = [(0.0, (0,), frozenset([0]))]
    for _ in range(n - 1):
        cand = []
        for acc, path, seen in beams:
            last = path[-1]
            for j in range(n):
                if j not in seen:
                    cand.append((acc + scores[last, j], path + (j,), seen | {j}))
        cand.sort(key=lambda t: (-t[0], t[1]))
        beams = cand[:beam_width]
    closed = [(acc + scores[path[-1], 0], path) for acc, path, _ in beams]
    closed.sort(key=lambda t: (-t[0], t[1]))
    return list(closed[0][1])


def ratio_metric(points, predicted, truth) -> dict:
    """Cycle cost, cost ratio to the reference tour, and edge-overlap accuracy."""
    cost = tour_cost(points, predicted)
    ref = tour_cost(points, truth)
    n = len(truth)
    truth_edges = {frozenset((truth[i], truth[(i + 1) % n])) for i in range(n)}
    pred_edges = [frozenset((predicted[i], predicted[(i + 1) % len(predicted)]))
                  for i in range(len(predicted))]
    acc = sum(e in truth_edges for e in pred_edges) / len(pred_edges)
    return {"cost": cost, "ratio": cost / ref, "accuracy": acc}
