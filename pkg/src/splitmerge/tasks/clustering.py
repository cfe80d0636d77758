"""Clustering task: k-means style reward, Gaussian/patch generators, and the
Lloyd baselines (flat and recursively binary)."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "ClusterInstance", "kmeans_cost", "kmeans_reward", "gen_gaussian_clusters",
    "gen_patch_clusters", "lloyd", "recursive_lloyd", "affinity_matrix",
]


@dataclass
class ClusterInstance:
    points: np.ndarray
    k: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)

    @property
    def n(self) -> int:
        return len(self.points)

    @property
    def affinity(self) -> np.ndarray:
        if "affinity" not in self.meta:
            self.meta["affinity"] = affinity_matrix(self.points)
        return self.meta["affinity"]


def affinity_matrix(points, sigma: float | None = None) -> np.ndarray:
    """w_ij = exp(-||xi-xj||^2 / sigma^2), sigma defaulting to the median
    pairwise distance (scale free); unit diagonal by construction."""
    pts = np.asarray(points, dtype=np.float64)
    sq = ((pts[:, None, :] - pts[None, :, :]) ** 2).sum(-1)
    if sigma is None:
        d = np.sqrt(sq[np.triu_indices(len(pts), k=1)])
        sigma = float(np.median(d)) if d.size else 1.0
        sigma = sigma or 1.0
    return np.exp(-sq / sigma ** 2)


def kmeans_cost(points, groups) -> float:
    """Sum over groups of n_i * sigma_i^2 (the within-group sum of squared
    deviations from the group centroid, all dimensions)."""
    pts = np.asarray(points, dtype=np.float64)
    total = 0.0
    for g in groups:
        g = np.asarray(list(g), dtype=np.intp)
        if len(g) == 0:
            continue
        x = pts[g]
        total += float(((x - x.mean(axis=0)) ** 2).sum())
    return total


def kmeans_reward(points, groups) -> float:
    """Negated clustering cost; the black-box reward for split training."""
    return -kmeans_cost(points, groups)


def labels_to_groups(labels, k=None):
    labels = np.asarray(labels)
    ids = range(int(labels.max()) + 1 if k is None else k)
    return [np.where(labels == i)[0] for i in ids]


def gen_gaussian_clusters(k: int, d: int, n: int, rng: np.random.Generator,
                          variance: float = 1e-3) -> ClusterInstance:
    """n/k points around each of k uniform centers in the unit cube."""
    if k < 1:
        raise ValueError("k must be >= 1")
    centers = rng.uniform(size=(k, d))
    counts = [n // k] * k
    for i in range(n - sum(counts)):
        counts[i] += 1
    pts = np.concatenate([
        c + rng.normal(scale=np.sqrt(variance), size=(m, d))
        for c, m in zip(centers, counts)
    ])
    return ClusterInstance(points=pts, k=k, meta={"kind": "gaussian", "variance": variance})


def _upsample_coarse(coarse: np.ndarray) -> np.ndarray:
    """Trilinear 2x2x2 -> 3x3x3 upsampling (flattened to 27 dims)."""
    grid = np.array([0.0, 0.5, 1.0])
    out = np.empty((3, 3, 3))
    for a, x in enumerate(grid):
        for b, y in enumerate(grid):
            for c, z in enumerate(grid):
                acc = 0.0
                for i in range(2):
                    for j in range(2):
                        for l in range(2):
                            wgt = ((1 - x) if i == 0 else x) * \
                                  ((1 - y) if j == 0 else y) * \
                                  ((1 - z) if l == 0 else z)
                            acc += wgt * coarse[i, j, l]
                out[a, b, c] = acc
    return out.reshape(27)


def gen_patch_clusters(k: int, n: int, rng: np.random.Generator) -> ClusterInstance:
    """Synthetic 27-dimensional patch vectors: k smooth prototypes plus
    spatially correlated noise (stand-in for natural image patches)."""
    protos = [_upsample_coarse(rng.normal(size=(2, 2, 2))) for _ in range(k)]
    counts = [n // k] * k
    for i in range(n - sum(counts)):
        counts[i] += 1
    pts = []
    for proto, m in zip(protos, counts):
        for _ in range(m):
            smooth = _upsample_coarse(rng.normal(size=(2, 2, 2)))
            pts.append(proto + 0.3 * smooth + 0.05 * rng.normal(size=27))
    return ClusterInstance(points=np.array(pts), k=k,
                           meta={"kind": "patch", "synthetic": True})


def lloyd(points, k: int, restarts: int, rng: np.random.Generator,
          max_iter: int = 100):
    """Standard Lloyd iterations, best of ``restarts`` seeded inits.

    Empty clusters are reseeded to the point farthest from its centroid. The
    per-iteration cost is asserted non-increasing.
    """
    pts = np.asarray(points, dtype=np.float64)
    n = len(pts)
    if k > n:
        raise ValueError("k must not exceed the number of points")
    best_labels, best_cost = None, np.inf
    for _ in range(max(restarts, 1)):
        centroids = pts[rng.choice(n, size=k, replace=False)].copy()
        labels = np.zeros(n, dtype=np.intp)
        prev_cost = np.inf
        for _ in range(max_iter):
            d = ((pts[:, None, :] - centroids[None, :, :]) ** 2).sum(-1)
            labels = d.argmin(axis=1)
            for j in range(k):
                members = pts[labels == j]
                if len(members) == 0:
                    far = int(((pts - centroids[j]) ** 2).sum(-1).argmax())
                    centroids[j] = pts[far]
                    labels[far] = j
                else:
                    centroids[j] = members.mean(axis=0)
            cost = kmeans_cost(pts, labels_to_groups(labels, k))
            assert cost <= prev_cost + 1e-9, "Lloyd cost increased"
            if cost >= prev_cost - 1e-12:
                break
            prev_cost = cost
        if cost < best_cost:
            best_cost, best_labels = cost, labels.copy()
    return best_labels, float(best_cost)


def recursive_lloyd(points, k: int, restarts: int, rng: np.random.Generator):
    """Binary Lloyd applied recursively log2(k) times to each subset."""
    if k < 1 or (k & (k - 1)) != 0:
        raise ValueError("k must be a power of two")
    pts = np.asarray(points, dtype=np.float64)
    labels = np.zeros(len(pts), dtype=np.intp)
    next_label = [1]

    def split(indices, remaining):
        if remaining == 0 or len(indices) < 2:
            return
        sub, _ = lloyd(pts[indices], 2, restarts, rng)
        right = indices[sub == 1]
        left = indices[sub == 0]
        if len(right):
            labels[right] = next_label[0]
            next_label[0] += 1
        split(left, remaining - 1)
        split(right, remaining - 1)

    split(np.arange(len(pts)), int(np.log2(k)))
    # compact labels
    uniq = {v: i for i, v in enumerate(sorted(set(labels.tolist())))}
    labels = np.array([uniq[v] for v in labels], dtype=np.intp)
    cost = kmeans_cost(pts, labels_to_groups(labels))
    return labels, float(cost)
