"""Split phase: set networks producing per-element split probabilities and the
recursive sampling of binary partition trees.

Two architectures are provided: a set2set stack that mixes every element with
the set mean, and a graph variant whose deeper layers aggregate through a
learned Gaussian similarity kernel (or a caller-supplied adjacency on the
first aggregation). Both are permutation equivariant by construction.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

__all__ = [
    "SetInput", "normalize_input", "Set2SetSplit", "GraphSplit",
    "TreeNode", "PartitionTree", "sample_tree", "tree_log_density",
    "split_balance_regularizer", "balance_penalty", "complexity_estimate",
]


@dataclass
class SetInput:
    """Standardized element rows plus the raw summary (mean, std per column)."""

    elements: np.ndarray   # (n, d) standardized
    summary: np.ndarray    # (2d,) concat of raw column means and stds
    raw: np.ndarray        # (n, d) untouched


def normalize_input(raw) -> SetInput:
    raw = np.asarray(raw, dtype=np.float64)
    if raw.ndim != 2 or raw.shape[0] < 1:
        raise ValueError(f"expected a nonempty (n, d) matrix, got shape {raw.shape}")
    mu = raw.mean(axis=0)
    sigma = raw.std(axis=0)
    safe = np.where(sigma > 0, sigma, 1.0)
    elements = (raw - mu) / safe
    return SetInput(elements=elements, summary=np.concatenate([mu, sigma]), raw=raw)


def _uniform_init(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    bound = 1.0 / np.sqrt(max(fan_in, 1))
    return Tensor(rng.uniform(-bound, bound, size=shape))


class Set2SetSplit:
    """Stack of layers h' = relu(h W1 + mean(h) W2); probs = sigmoid(h_R b)."""

    arch = "set2set"

    def __init__(self, in_dim: int, hidden: int, layers: int, rng: np.random.Generator):
        if layers < 1:
            raise ValueError("need at least one layer")
        self.in_dim = in_dim
        self.hidden = hidden
        self.layers = layers
        self.params: dict[str, Tensor] = {}
        self.params["B1_0"] = _uniform_init(rng, (in_dim, hidden), in_dim)
        self.params["B2_0"] = _uniform_init(rng, (2 * in_dim, hidden), 2 * in_dim)
        for r in range(1, layers):
            self.params[f"B1_{r}"] = _uniform_init(rng, (hidden, hidden), hidden)
            self.params[f"B2_{r}"] = _uniform_init(rng, (hidden, hidden), hidden)
        self.params["b"] = _uniform_init(rng, (hidden,), hidden)

    def hyper(self) -> dict:
        return {"in_dim": self.in_dim, "hidden": self.hidden, "layers": self.layers}

    def _aggregate(self, h: Tensor, r: int, adjacency) -> Tensor:
        return ad.mean_rows(h)

    def _hidden_stack(self, inp: SetInput, adjacency=None) -> Tensor:
        x = Tensor(inp.elements)
        mu = Tensor(inp.summary)
        h = ad.relu(ad.add(ad.matmul(x, self.params["B1_0"]),
                           ad.matmul(mu, self.params["B2_0"])))
        for r in range(1, self.layers):
            agg = self._aggregate(h, r, adjacency)
            h = ad.relu(ad.add(ad.matmul(h, self.params[f"B1_{r}"]),
                               ad.matmul(agg, self.params[f"B2_{r}"])))
        return h

    def scores(self, inp: SetInput, adjacency=None) -> Tensor:
        """Pre-sigmoid per-element scores, shape (n,)."""
        h = self._hidden_stack(inp, adjacency)
        return ad.matmul(h, self.params["b"])

    def probs(self, inp: SetInput, adjacency=None) -> Tensor:
        return ad.sigmoid(self.scores(inp, adjacency))


class GraphSplit(Set2SetSplit):
    """Split stack whose aggregation runs through a similarity kernel.

    The kernel is gaussian on hidden distances with a learned bandwidth; when
    the caller provides an instance adjacency it replaces phi on the first
    aggregation layer only.
    """

    arch = "graph"

    def __init__(self, in_dim, hidden, layers, rng):
        super().__init__(in_dim, hidden, layers, rng)
        self.params["log_tau"] = Tensor(0.0)

    def kernel(self, h: Tensor) -> Tensor:
        d = ad.pairwise_sqdist(h)
        inv = ad.exp(ad.affine(self.params["log_tau"], -2.0, 0.0))
        return ad.exp(ad.neg(ad.mul(d, inv)))

    def _aggregate(self, h: Tensor, r: int, adjacency) -> Tensor:
        n = h.data.shape[0]
        if r == 1 and adjacency is not None:
            adjacency = np.asarray(adjacency, dtype=np.float64)
            if adjacency.shape != (n, n):
                raise ValueError(f"adjacency shape {adjacency.shape} does not match n={n}")
            if np.any(adjacency < 0) or not np.allclose(adjacency, adjacency.T, atol=1e-9):
                raise ValueError("adjacency must be symmetric and nonnegative")
            a = Tensor(adjacency)
        else:
            a = self.kernel(h)
        return ad.scale(ad.matmul(a, h), 1.0 / n)


# ---------------------------------------------------------------------------
# partition trees


@dataclass
class TreeNode:
    scale: int
    pos: int
    indices: np.ndarray                       # original element indices
    probs: np.ndarray | None = None           # set when a split was sampled here
    labels: np.ndarray | None = None
    children: tuple | None = None
    log_prob: float = 0.0                     # Bernoulli log-density of this node's sample

    @property
    def size(self) -> int:
        return len(self.indices)

    @property
    def is_leaf(self) -> bool:
        return self.children is None

    @property
    def sampled(self) -> bool:
        return self.probs is not None


@dataclass
class PartitionTree:
    root: TreeNode
    n: int
    max_depth: int
    leaf_threshold: int
    log_density: float = 0.0
    leaves: list = field(default_factory=list)
    sampling_nodes: list = field(default_factory=list)

    def internal_nodes(self):
        return [v for v in self.sampling_nodes if not v.is_leaf]

    def all_nodes(self):
        out, stack = [], [self.root]
        while stack:
            v = stack.pop()
            out.append(v)
            if v.children is not None:
                stack.extend(v.children)
        return out


def _node_log_prob(probs: np.ndarray, labels: np.ndarray) -> float:
    out = np.empty_like(probs)
    on = labels == 1
    out[on] = np.log(probs[on])
    out[~on] = np.log1p(-probs[~on])
    return float(out.sum())


def sample_tree(raw, split_model, max_depth: int, leaf_threshold: int,
                rng: np.random.Generator, adjacency=None) -> PartitionTree:
    """Recursively sample a binary partition tree over the rows of ``raw``.

    Recursion stops when a node has at most ``leaf_threshold`` elements or sits
    at depth ``max_depth``. A sampled split that sends every element to one
    side demotes the node to a leaf (its Bernoulli factor still counts toward
    the tree density).
    """
    if max_depth < 0 or leaf_threshold < 1:
        raise ValueError("need max_depth >= 0 and leaf_threshold >= 1")
    raw = np.asarray(raw, dtype=np.float64)
    n = raw.shape[0]
    tree = PartitionTree(root=None, n=n, max_depth=max_depth, leaf_threshold=leaf_threshold)

    def build(indices: np.ndarray, j: int, k: int) -> TreeNode:
        node = TreeNode(scale=j, pos=k, indices=indices)
        if len(indices) <= leaf_threshold or j == max_depth:
            tree.leaves.append(node)
            return node
        sub_adj = adjacency[np.ix_(indices, indices)] if adjacency is not None else None
        p = split_model.probs(normalize_input(raw[indices]), sub_adj).data
        labels = (rng.random(len(indices)) < p).astype(np.int64)
        node.probs = p
        node.labels = labels
        node.log_prob = _node_log_prob(p, labels)
        tree.log_density += node.log_prob
        tree.sampling_nodes.append(node)
        left, right = indices[labels == 0], indices[labels == 1]
        if len(left) == 0 or len(right) == 0:
            tree.leaves.append(node)   # degenerate split: demoted to leaf
            return node
        node.children = (build(left, j + 1, 2 * k), build(right, j + 1, 2 * k + 1))
        return node

    tree.root = build(np.arange(n), 0, 0)
    return tree


def tree_log_density(tree: PartitionTree, split_model=None, raw=None, adjacency=None):
    """Log-density of the sampled tree.

    Without a model this is the stored float. With a model (and the raw rows
    the tree was sampled from) the density is rebuilt through the tape so it
    can be differentiated with respect to the split parameters.
    """
    if split_model is None:
        return tree.log_density
    if raw is None:
        raise ValueError("differentiable density needs the raw element rows")
    raw = np.asarray(raw, dtype=np.float64)
    total = None
    for node in tree.sampling_nodes:
        sub_adj = adjacency[np.ix_(node.indices, node.indices)] if adjacency is not None else None
        s = split_model.scores(normalize_input(raw[node.indices]), sub_adj)
        z = node.labels.astype(np.float64)
        # log p(z=1) = -softplus(-s), log p(z=0) = -softplus(s)
        term = ad.add(ad.mul(ad.softplus(ad.neg(s)), Tensor(z)),
                      ad.mul(ad.softplus(s), Tensor(1.0 - z)))
        contrib = ad.neg(ad.sum_all(term))
        total = contrib if total is None else ad.add(total, contrib)
    return total if total is not None else Tensor(0.0)


def balance_penalty(prob_vectors) -> float:
    """Numeric negative-variance penalty over a list of probability vectors."""
    total = 0.0
    for p in prob_vectors:
        p = np.asarray(p, dtype=np.float64)
        total -= float((p * p).mean() - p.mean() ** 2)
    return total


def split_balance_regularizer(tree: PartitionTree, split_model=None, raw=None, adjacency=None):
    """Negative variance of split probabilities, summed over sampling nodes.

    Always <= 0; zero iff every node's probabilities are all equal. With a
    model the value is rebuilt on the tape (differentiable); otherwise the
    stored numeric probabilities are used.
    """
    if split_model is None:
        return balance_penalty([v.probs for v in tree.sampling_nodes])
    if raw is None:
        raise ValueError("differentiable regularizer needs the raw element rows")
    raw = np.asarray(raw, dtype=np.float64)
    total = None
    for node in tree.sampling_nodes:
        sub_adj = adjacency[np.ix_(node.indices, node.indices)] if adjacency is not None else None
        p = split_model.probs(normalize_input(raw[node.indices]), sub_adj)
        m = ad.mean_all(p)
        var = ad.sub(ad.mean_all(ad.mul(p, p)), ad.mul(m, m))
        total = ad.neg(var) if total is None else ad.add(total, ad.neg(var))
    return total if total is not None else Tensor(0.0)


def complexity_estimate(tree: PartitionTree) -> dict:
    """Linear per-node visit cost and the size-weighted mean max-side fraction."""
    cost = sum(v.size for v in tree.all_nodes())
    weighted, weight = 0.0, 0.0
    for v in tree.sampling_nodes:
        if v.is_leaf:            # demoted degenerate split: fully unbalanced
            frac = 1.0
        else:
            frac = max(v.children[0].size, v.children[1].size) / v.size
        weighted += v.size * frac
        weight += v.size
    alpha = weighted / weight if weight > 0 else 1.0
    return {"cost": cost, "mean_alpha": alpha}
