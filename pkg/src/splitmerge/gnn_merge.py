"""Edge-scoring merge over the union graph of two partial solutions.

Node states are updated through a weighted self term plus kernel-aggregated
neighbour messages; the output is a symmetric nonnegative edge score matrix
(gaussian kernel of projected node states), consumed by beam search.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

__all__ = ["GnnMerge", "gnn_edge_merge"]


def _uniform(rng, shape, fan_in):
    bound = 1.0 / np.sqrt(max(fan_in, 1))
    return Tensor(rng.uniform(-bound, bound, size=shape))


class GnnMerge:
    arch = "gnn"

    def __init__(self, in_dim: int, hidden: int, layers: int, out_dim: int,
                 rng: np.random.Generator):
        self.in_dim = in_dim
        self.hidden = hidden
        self.layers = layers
        self.out_dim = out_dim
        self.params: dict[str, Tensor] = {}
        d = in_dim
        for k in range(layers):
            self.params[f"W1_{k}"] = _uniform(rng, (d, hidden), d)
            self.params[f"W2_{k}"] = _uniform(rng, (d, hidden), d)
            self.params[f"beta_{k}"] = Tensor(1.0)
            d = hidden
        self.params["Wo"] = _uniform(rng, (d, out_dim), d)
        self.params["log_tau"] = Tensor(0.0)
        self.params["log_tau_out"] = Tensor(0.0)

    def hyper(self) -> dict:
        return {"in_dim": self.in_dim, "hidden": self.hidden,
                "layers": self.layers, "out_dim": self.out_dim}

    def _kernel(self, v: Tensor) -> Tensor:
        d = ad.pairwise_sqdist(v)
        inv = ad.exp(ad.affine(self.params["log_tau"], -2.0, 0.0))
        return ad.exp(ad.neg(ad.mul(d, inv)))

    def edge_logits(self, node_feats, init_adj=None) -> Tensor:
        """Symmetric real-valued edge logits over the union graph.

        ``init_adj`` (e.g. the partial-tour indicator matrix) drives the first
        aggregation; deeper layers aggregate through the learned kernel.
        """
        node_feats = np.asarray(node_feats, dtype=np.float64)
        n = node_feats.shape[0]
        v = Tensor(node_feats)
        for k in range(self.layers):
            if k == 0 and init_adj is not None:
                init_adj = np.asarray(init_adj, dtype=np.float64)
                if init_adj.shape != (n, n):
                    raise ValueError(f"adjacency shape {init_adj.shape} != ({n}, {n})")
                if np.any(init_adj < 0) or not np.allclose(init_adj, init_adj.T, atol=1e-9):
                    raise ValueError("adjacency must be symmetric and nonnegative")
                a = Tensor(init_adj)
            else:
                a = self._kernel(v)
            self_term = ad.mul(ad.matmul(v, self.params[f"W1_{k}"]), self.params[f"beta_{k}"])
            agg = ad.scale(ad.matmul(ad.matmul(a, v), self.params[f"W2_{k}"]), 1.0 / n)
            v = ad.relu(ad.add(self_term, agg))
        proj = ad.matmul(v, self.params["Wo"])
        inv = ad.exp(ad.affine(self.params["log_tau_out"], -2.0, 0.0))
        return ad.neg(ad.mul(ad.pairwise_sqdist(proj), inv))

    def edge_scores(self, node_feats, init_adj=None) -> Tensor:
        """exp of the logits: symmetric, strictly positive scores."""
        return ad.exp(self.edge_logits(node_feats, init_adj))


def gnn_edge_merge(model: GnnMerge, node_feats, init_adj=None) -> Tensor:
    return model.edge_scores(node_feats, init_adj)
