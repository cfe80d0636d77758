"""Merge phase: pointer-attention merge blocks, recursive fine-to-coarse
merging over a partition tree, and the factorized stochastic-chain algebra.

Every attention row spans the merge inputs plus one terminal column and is
exactly row-stochastic on that extended index set. In the assembled chain,
non-root blocks keep their content rows renormalized (conditional on "did not
stop"), the root block keeps its full rows including the final stop step, and
the terminal column passes through lower levels as an identity tail, so every
chain factor is exactly row-stochastic and the product's rows sum to one.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

__all__ = [
    "MergePair", "GruCell", "PtrNetMerge", "regularized_binarize",
    "ChainLevel", "StochasticChain", "chain_product", "recursive_merge",
    "MergeResult", "chain_nll",
]


@dataclass
class MergePair:
    """Two ordered sequences of element feature rows; the second may be empty."""

    y0: np.ndarray
    y1: np.ndarray

    def __post_init__(self):
        self.y0 = np.asarray(self.y0, dtype=np.float64)
        self.y1 = np.asarray(self.y1, dtype=np.float64)
        if self.y1.size == 0:
            self.y1 = np.zeros((0, self.y0.shape[1] if self.y0.ndim == 2 else 0))
        if self.y0.shape[0] == 0:
            raise ValueError("first merge input must be nonempty")
        if self.y1.shape[0] > 0 and self.y1.shape[1] != self.y0.shape[1]:
            raise ValueError("merge input widths differ")

    @property
    def n(self) -> int:
        return self.y0.shape[0] + self.y1.shape[0]

    @property
    def features(self) -> np.ndarray:
        return np.concatenate([self.y0, self.y1], axis=0) if self.y1.shape[0] else self.y0


def _uniform(rng, shape, fan_in):
    bound = 1.0 / np.sqrt(max(fan_in, 1))
    return Tensor(rng.uniform(-bound, bound, size=shape))


class GruCell:
    """Standard gated recurrent cell over 1-d states."""

    def __init__(self, in_dim, hidden, rng, params: dict, prefix: str):
        self.hidden = hidden
        for gate in ("z", "r", "h"):
            params[f"{prefix}_W{gate}"] = _uniform(rng, (in_dim, hidden), in_dim)
            params[f"{prefix}_U{gate}"] = _uniform(rng, (hidden, hidden), hidden)
            params[f"{prefix}_b{gate}"] = Tensor(np.zeros(hidden))
        self.p = params
        self.prefix = prefix

    def step(self, x: Tensor, h: Tensor) -> Tensor:
        p, pre = self.p, self.prefix
        z = ad.sigmoid(ad.add(ad.add(ad.matmul(x, p[f"{pre}_Wz"]),
                                     ad.matmul(h, p[f"{pre}_Uz"])), p[f"{pre}_bz"]))
        r = ad.sigmoid(ad.add(ad.add(ad.matmul(x, p[f"{pre}_Wr"]),
                                     ad.matmul(h, p[f"{pre}_Ur"])), p[f"{pre}_br"]))
        hh = ad.tanh(ad.add(ad.add(ad.matmul(x, p[f"{pre}_Wh"]),
                                   ad.matmul(ad.mul(r, h), p[f"{pre}_Uh"])), p[f"{pre}_bh"]))
        return ad.add(ad.mul(ad.affine(z, -1.0, 1.0), h), ad.mul(z, hh))


class PtrNetMerge:
    """Pointer-attention merge: GRU encoder/decoder, attention over the inputs
    of the pair plus a terminal column used as the stop decision."""

    arch = "ptrnet"

    def __init__(self, in_dim: int, hidden: int, rng: np.random.Generator):
        self.in_dim = in_dim
        self.hidden = hidden
        self.params: dict[str, Tensor] = {}
        self.enc = GruCell(in_dim, hidden, rng, self.params, "enc")
        self.dec = GruCell(in_dim, hidden, rng, self.params, "dec")
        self.params["A0"] = _uniform(rng, (hidden, hidden), hidden)
        self.params["A1"] = _uniform(rng, (hidden, hidden), hidden)
        self.params["go"] = _uniform(rng, (in_dim,), in_dim)
        self.params["att_e"] = _uniform(rng, (hidden, hidden), hidden)
        self.params["att_d"] = _uniform(rng, (hidden, hidden), hidden)
        self.params["att_v"] = _uniform(rng, (hidden,), hidden)
        self.params["end_key"] = _uniform(rng, (hidden,), hidden)

    def hyper(self) -> dict:
        return {"in_dim": self.in_dim, "hidden": self.hidden}

    # -- encoder ------------------------------------------------------------
    def encode(self, pair: MergePair):
        """Per-element encodings (stacked) and the mixed initial decoder state."""
        def run(seq):
            h = Tensor(np.zeros(self.hidden))
            states = []
            for row in seq:
                h = self.enc.step(Tensor(row), h)
                states.append(h)
            return states

        s0 = run(pair.y0)
        s1 = run(pair.y1)
        enc = ad.stack_rows(s0 + s1)
        d0 = ad.matmul(s0[-1], self.params["A0"])
        if s1:
            d0 = ad.add(d0, ad.matmul(s1[-1], self.params["A1"]))
        return enc, ad.relu(d0)

    # -- attention ----------------------------------------------------------
    def _enc_keys(self, enc: Tensor) -> Tensor:
        return ad.matmul(enc, self.params["att_e"])

    def attention_row(self, enc_keys: Tensor, d: Tensor) -> Tensor:
        """Stochastic row over the input positions plus the terminal column."""
        q = ad.matmul(d, self.params["att_d"])
        u = ad.matmul(ad.tanh(ad.add(enc_keys, q)), self.params["att_v"])
        t_end = ad.tanh(ad.add(self.params["end_key"], q))
        u_end = ad.matmul(ad.stack_rows([t_end]), self.params["att_v"])
        return ad.softmax_rows(ad.concat_rows([u, u_end]))

    # -- decoding -----------------------------------------------------------
    def teacher_forced(self, pair: MergePair, targets) -> Tensor:
        """Attention rows conditioned on the ground-truth prefix.

        ``targets`` are column indices into [y0; y1]; the terminal index
        ``pair.n`` is allowed only as the final target. Returns a
        (len(targets), n+1) row-stochastic matrix.
        """
        targets = [int(t) for t in targets]
        feats = pair.features
        n = pair.n
        for i, t in enumerate(targets):
            if not (0 <= t <= n) or (t == n and i != len(targets) - 1):
                raise ValueError(f"target {t} out of range for {n} inputs")
        enc, d = self.encode(pair)
        keys = self._enc_keys(enc)
        x = self.params["go"]
        rows = []
        for t in targets:
            d = self.dec.step(x, d)
            rows.append(self.attention_row(keys, d))
            if t < n:
                x = Tensor(feats[t])
        if not rows:
            return Tensor(np.zeros((0, n + 1)))
        return ad.stack_rows(rows)

    def generative(self, pair: MergePair, min_steps: int = 1, forced_picks=None):
        """Decode feeding back the argmax pick each step.

        Stops when the terminal column wins the argmax (excluded during the
        first ``min_steps`` steps so the output is never empty) or after
        n+1 steps. ``forced_picks`` replays a recorded pick sequence while
        recomputing the rows (used for gradient checking).

        Returns (picks, gamma, rows) where ``picks`` are content column
        indices, ``gamma`` the (len(picks), n+1) stacked content rows, and
        ``rows`` includes the final stop row when one was emitted.
        """
        feats = pair.features
        n = pair.n
        enc, d = self.encode(pair)
        keys = self._enc_keys(enc)
        x = self.params["go"]
        picks, rows = [], []
        cap = n + 1
        for step in range(cap):
            d = self.dec.step(x, d)
            row = self.attention_row(keys, d)
            rows.append(row)
            if forced_picks is not None:
                pick = forced_picks[step] if step < len(forced_picks) else n
            else:
                content = row.data[:n]
                if step < min_steps:
                    pick = int(np.argmax(content))
                else:
                    pick = int(np.argmax(row.data))
            if pick == n:
                break
            picks.append(pick)
            x = Tensor(feats[pick])
        gamma = ad.stack_rows(rows[: len(picks)]) if picks else Tensor(np.zeros((0, n + 1)))
        return picks, gamma, rows


def binarize_rows(gamma: np.ndarray) -> np.ndarray:
    """Exact one-hot rows at each row's argmax."""
    gamma = np.asarray(gamma, dtype=np.float64)
    out = np.zeros_like(gamma)
    if gamma.size:
        out[np.arange(gamma.shape[0]), gamma.argmax(axis=1)] = 1.0
    return out


def regularized_binarize(gamma, eps: float, depth: int) -> Tensor:
    """Quantize rows to {eps^(1/J), 1 - n*eps^(1/J)} keeping the argmax.

    Returns a detached constant tensor: the result is piecewise constant in
    the parameters, so no gradient flows through it. Rejects eps outside
    (0, n^-J), which would push entries out of (0, 1).
    """
    data = gamma.data if isinstance(gamma, Tensor) else np.asarray(gamma, dtype=np.float64)
    one_d = data.ndim == 1
    rows = data[None, :] if one_d else data
    n = rows.shape[1]
    depth = max(int(depth), 1)
    if not (0.0 < eps < float(n) ** (-depth)):
        raise ValueError(f"eps={eps} out of range (0, {float(n) ** (-depth):.3g}) for width {n}")
    low = eps ** (1.0 / depth)
    out = np.full_like(rows, low)
    if rows.size:
        out[np.arange(rows.shape[0]), rows.argmax(axis=1)] = 1.0 - n * low
    return Tensor(out[0] if one_d else out)


# ---------------------------------------------------------------------------
# stochastic chain


@dataclass
class ChainLevel:
    blocks: list                       # Tensors, one per frontier entity
    mode: str = "continuous"           # continuous | binarized
    terminal_tail: bool = True         # identity tail row/col (False at root)
    block_kinds: list = field(default_factory=list)   # merge | leaf | identity


@dataclass
class StochasticChain:
    levels: list                       # root level first
    column_elements: np.ndarray = None # original element id per bottom content column

    @property
    def depth(self) -> int:
        return len(self.levels) - 1


def chain_product(chain: StochasticChain) -> Tensor:
    """Dense product of the level matrices (root rows by bottom columns)."""
    product = None
    for level in chain.levels:
        mat = ad.block_diag(level.blocks, tail_identity=level.terminal_tail)
        if product is None:
            product = mat
        else:
            if product.data.shape[1] != mat.data.shape[0]:
                raise ad.ShapeError(
                    f"chain level dimensions do not chain: {product.data.shape} @ {mat.data.shape}")
            product = ad.matmul(product, mat)
    return product


def _renorm_content(gamma: Tensor, n: int) -> Tensor:
    """Content part of generative rows, renormalized conditional on non-stop."""
    content = ad.slice_cols(gamma, 0, n)
    sums = ad.matmul(content, Tensor(np.ones(n)))
    return ad.div_rows(content, sums)


@dataclass
class NodeMergeRecord:
    node: object
    output_ids: list                   # original element ids, one per output step
    gamma: np.ndarray                  # full rows incl. terminal column (numeric copy)
    is_root: bool
    kind: str                          # merge | leaf


@dataclass
class MergeResult:
    chain: StochasticChain
    output_ids: list
    records: list
    target_cols: list | None = None


def recursive_merge(tree, merge_model, elements: np.ndarray, mode: str,
                    target_ids=None, eps: float = 1e-6,
                    binarize_fine: bool = False, replay=None) -> MergeResult:
    """Merge a partition tree fine-to-coarse into a stochastic chain.

    Leaves are transformed by the merge block applied to (X, empty); interior
    nodes merge their children's generated outputs; the root row matrix is
    teacher-forced on ``target_ids`` (original element indices) when mode is
    "teacher-forced-at-root", generative otherwise. With ``binarize_fine``
    every non-root model block is replaced by its detached eps-regularized
    binarization. ``replay`` pins the generated pick sequences of a previous
    result so the same structure can be re-evaluated under perturbed weights.
    """
    if mode not in ("teacher-forced-at-root", "fully-generative"):
        raise ValueError(f"unknown merge mode {mode!r}")
    elements = np.asarray(elements, dtype=np.float64)
    records: list[NodeMergeRecord] = []
    replay_map = {}
    if replay is not None:
        replay_map = {id(r.node): r for r in replay.records}

    def run_node(node, child_out: list | None):
        """Generative merge at one non-root node; returns (output ids, picks, gamma)."""
        if child_out is None:
            pair = MergePair(elements[node.indices], np.zeros((0, elements.shape[1])))
            ids_in = list(node.indices)
            kind = "leaf"
        else:
            (ids0, f0), (ids1, f1) = child_out
            ids_in = ids0 + ids1
            pair = MergePair(f0, f1)
            kind = "merge"
        forced = None
        if id(node) in replay_map:
            forced = list(replay_map[id(node)].output_ids_cols)
        picks, gamma, rows = merge_model.generative(pair, forced_picks=forced)
        out_ids = [ids_in[p] for p in picks]
        rec = NodeMergeRecord(node=node, output_ids=out_ids,
                              gamma=np.array([r.data for r in rows]), is_root=False, kind=kind)
        rec.output_ids_cols = picks
        records.append(rec)
        return out_ids, picks, gamma

    # post-order walk building per-node outputs and content blocks
    blocks_at_node: dict[int, Tensor] = {}
    out_ids_at_node: dict[int, list] = {}

    def walk(node):
        if node.is_leaf:
            child = None
        else:
            l, r = node.children
            walk(l)
            walk(r)
            child = [(out_ids_at_node[id(l)], elements[out_ids_at_node[id(l)]]),
                     (out_ids_at_node[id(r)], elements[out_ids_at_node[id(r)]])]
        if node is tree.root:
            return  # root handled separately below
        out_ids, picks, gamma = run_node(node, child)
        out_ids_at_node[id(node)] = out_ids
        blocks_at_node[id(node)] = _renorm_content(gamma, gamma.data.shape[1] - 1)

    walk(tree.root)

    # root block keeps full rows (content + stop step, terminal column included)
    root = tree.root
    if root.is_leaf:
        pair = MergePair(elements[root.indices], np.zeros((0, elements.shape[1])))
        ids_in = list(root.indices)
    else:
        l, r = root.children
        ids0, ids1 = out_ids_at_node[id(l)], out_ids_at_node[id(r)]
        pair = MergePair(elements[ids0], elements[ids1])
        ids_in = ids0 + ids1
    target_cols = None
    if mode == "teacher-forced-at-root":
        if target_ids is None:
            raise ValueError("teacher-forced mode needs target element ids")
        feats = elements[list(target_ids)]
        enc, d = merge_model.encode(pair)
        keys = merge_model._enc_keys(enc)
        x = merge_model.params["go"]
        rows = []
        for s in range(len(target_ids) + 1):   # content steps then the stop step
            d = merge_model.dec.step(x, d)
            rows.append(merge_model.attention_row(keys, d))
            if s < len(target_ids):
                x = Tensor(feats[s])
        root_gamma = ad.stack_rows(rows)
        output_ids = [ids_in[int(np.argmax(r.data[:pair.n]))] for r in rows[:-1]]
        records.append(NodeMergeRecord(node=root, output_ids=list(target_ids),
                                       gamma=root_gamma.data.copy(), is_root=True,
                                       kind="leaf" if root.is_leaf else "merge"))
    else:
        forced = None
        if id(root) in replay_map:
            forced = list(replay_map[id(root)].output_ids_cols)
        picks, gamma, rows = merge_model.generative(pair, forced_picks=forced)
        output_ids = [ids_in[p] for p in picks]
        root_gamma = ad.stack_rows(rows)  # content rows plus stop row if emitted
        rec = NodeMergeRecord(node=root, output_ids=output_ids,
                              gamma=root_gamma.data.copy(), is_root=True,
                              kind="leaf" if root.is_leaf else "merge")
        rec.output_ids_cols = picks
        records.append(rec)

    # Assemble levels by frontier expansion from the root. At level s, an
    # internal node of scale s contributes its merge block, a leaf already in
    # the frontier passes its output through as identity; the bottom level
    # holds every leaf transform, with columns spanning all elements.
    levels = [ChainLevel(blocks=[root_gamma], terminal_tail=False,
                         block_kinds=["root"])]
    if root.is_leaf:
        depth_for_eps = 1
    else:
        internals = [v for v in tree.all_nodes() if not v.is_leaf]
        bottom = max(v.scale for v in internals) + 1
        depth_for_eps = bottom
        frontier = list(root.children)
        for s in range(1, bottom):
            blocks, kinds, nxt = [], [], []
            for v in frontier:
                if v.is_leaf:
                    blocks.append(Tensor(np.eye(len(out_ids_at_node[id(v)]))))
                    kinds.append("identity")
                    nxt.append(v)
                else:
                    blocks.append(blocks_at_node[id(v)])
                    kinds.append("merge")
                    nxt.extend(v.children)
            levels.append(ChainLevel(blocks=blocks, terminal_tail=True, block_kinds=kinds))
            frontier = nxt
        assert all(v.is_leaf for v in frontier)
        levels.append(ChainLevel(blocks=[blocks_at_node[id(v)] for v in frontier],
                                 terminal_tail=True,
                                 block_kinds=["leaf"] * len(frontier)))

    if binarize_fine:
        for level in levels[1:]:
            new_blocks = []
            for b, kind in zip(level.blocks, level.block_kinds):
                if kind == "identity" or b.data.shape[0] == 0:
                    new_blocks.append(Tensor(b.data.copy()))
                else:
                    new_blocks.append(regularized_binarize(b.data, eps, depth_for_eps))
            level.blocks = new_blocks
            level.mode = "binarized"

    column_elements = np.concatenate([v.indices for v in _bottom_leaves(tree)]) \
        if tree.leaves else np.arange(tree.n)
    chain = StochasticChain(levels=levels, column_elements=column_elements)
    if target_ids is not None:
        col_of = {int(e): c for c, e in enumerate(column_elements)}
        target_cols = [col_of[int(t)] for t in target_ids]
    return MergeResult(chain=chain, output_ids=output_ids, records=records,
                       target_cols=target_cols)


def _bottom_leaves(tree):
    """Leaves in left-to-right traversal order (the chain's column order)."""
    out = []

    def visit(v):
        if v.is_leaf:
            out.append(v)
        else:
            visit(v.children[0])
            visit(v.children[1])

    visit(tree.root)
    return out


def chain_nll(result: MergeResult) -> Tensor:
    """Negative log-likelihood of the root targets through the chain product.

    Content steps gather their target element's column; the final stop step
    gathers the terminal column.
    """
    if result.target_cols is None:
        raise ValueError("result was not produced in teacher-forced mode")
    product = chain_product(result.chain)
    n_cols = product.data.shape[1]
    s = len(result.target_cols)
    rows = np.arange(s + 1)
    cols = np.array(result.target_cols + [n_cols - 1])
    return ad.neg(ad.sum_all(ad.log(ad.pick(product, rows, cols))))
