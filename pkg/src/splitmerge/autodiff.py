"""Dense float64 tensors with reverse-mode differentiation on a gradient tape.

Every model block in this package builds its math out of the ops below. Ops
executed while a tape is active are recorded in creation order (which is a
topological order by construction); ``Tape.backward`` replays the adjoint
closures of the nodes reachable from a scalar root.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor", "Tape", "ShapeError", "tensor", "zeros", "backward", "forward_op",
    "matmul", "add", "sub", "mul", "scale", "affine", "neg",
    "relu", "sigmoid", "tanh", "exp", "log", "softplus",
    "softmax_rows", "concat_rows", "stack_rows", "mean_rows", "sum_rows",
    "sum_all", "mean_all", "gather", "take_rows", "take_col", "slice_rows",
    "slice_cols", "pick", "div_rows", "pairwise_sqdist", "transpose",
    "block_diag",
]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible with an op."""


class Tensor:
    """A float64 array plus an optional handle into the active tape."""

    __slots__ = ("data", "grad", "_entry")

    def __init__(self, data):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self._entry = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def on_tape(self):
        return self._entry is not None

    def zero_grad(self):
        self.grad = None

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape})"

    # light operator sugar over the module-level ops
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    def __rmul__(self, other):
        return scale(self, float(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return neg(self)


class _Entry:
    __slots__ = ("index", "parents", "backward_fn")

    def __init__(self, index, parents, backward_fn):
        self.index = index
        self.parents = parents
        self.backward_fn = backward_fn


class Tape:
    """Append-only record of ops; parents always precede their children."""

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        _STACK.append(self)
        return self

    def __exit__(self, *exc):
        popped = _STACK.pop()
        assert popped is self
        return False

    def backward(self, root: Tensor):
        """Accumulate d(root)/d(x) into ``x.grad`` for every reachable tensor.

        ``root`` must be a scalar recorded on this tape. Unreachable nodes are
        left untouched (their adjoint is zero).
        """
        if root.data.size != 1:
            raise ShapeError(f"backward root must be scalar, got shape {root.data.shape}")
        entry = root._entry
        if entry is None or self.nodes[entry.index][0] is not root:
            raise ValueError("root tensor is not recorded on this tape")
        # reachability pass over parent links
        reachable = np.zeros(len(self.nodes), dtype=bool)
        reachable[entry.index] = True
        stack = [entry]
        while stack:
            e = stack.pop()
            for p in e.parents:
                pe = p._entry
                if pe is not None and not reachable[pe.index]:
                    reachable[pe.index] = True
                    stack.append(pe)
        _accum(root, np.ones_like(root.data))
        for i in range(entry.index, -1, -1):
            if reachable[i]:
                t, fn = self.nodes[i]
                if fn is not None and t.grad is not None:
                    fn(t.grad)


_STACK: list[Tape] = []


def _accum(t: Tensor, g):
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad += g


def _make(data, parents, backward_fn):
    out = Tensor(data)
    if _STACK:
        tape = _STACK[-1]
        out._entry = _Entry(len(tape.nodes), parents, backward_fn)
        tape.nodes.append((out, backward_fn))
    return out


def tensor(data) -> Tensor:
    return Tensor(data)


def zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape))


def backward(tape: Tape, root: Tensor):
    """Module-level alias for ``tape.backward(root)``."""
    tape.backward(root)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim == 0 or bd.ndim == 0 or ad.shape[-1] != bd.shape[0]:
        raise ShapeError(f"matmul shapes do not chain: {ad.shape} @ {bd.shape}")
    out_data = ad @ bd

    def bw(g):
        if ad.ndim == 2 and bd.ndim == 2:
            _accum(a, g @ bd.T)
            _accum(b, ad.T @ g)
        elif ad.ndim == 1 and bd.ndim == 2:   # (n,) @ (n,m) -> (m,)
            _accum(a, bd @ g)
            _accum(b, np.outer(ad, g))
        elif ad.ndim == 2 and bd.ndim == 1:   # (n,m) @ (m,) -> (n,)
            _accum(a, np.outer(g, bd))
            _accum(b, ad.T @ g)
        else:                                  # (n,) @ (n,) -> ()
            _accum(a, g * bd)
            _accum(b, g * ad)

    return _make(out_data, (a, b), bw)


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got shape {a.data.shape}")

    def bw(g):
        _accum(a, g.T)

    return _make(a.data.T, (a,), bw)


# ---------------------------------------------------------------------------
# pointwise arithmetic

def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data
    if ad.shape == bd.shape:
        def bw(g):
            _accum(a, g)
            _accum(b, g)
    elif ad.ndim == 2 and bd.ndim == 1 and ad.shape[1] == bd.shape[0]:
        def bw(g):
            _accum(a, g)
            _accum(b, g.sum(axis=0))
    elif bd.ndim == 0:
        def bw(g):
            _accum(a, g)
            _accum(b, g.sum())
    else:
        raise ShapeError(f"add shapes incompatible: {ad.shape} + {bd.shape}")
    return _make(ad + bd, (a, b), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    return add(a, scale(b, -1.0))


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data
    if ad.shape == bd.shape:
        def bw(g):
            _accum(a, g * bd)
            _accum(b, g * ad)
    elif bd.ndim == 0:
        def bw(g):
            _accum(a, g * bd)
            _accum(b, (g * ad).sum())
    elif ad.ndim == 0:
        def bw(g):
            _accum(a, (g * bd).sum())
            _accum(b, g * ad)
    else:
        raise ShapeError(f"mul shapes incompatible: {ad.shape} * {bd.shape}")
    return _make(ad * bd, (a, b), bw)


def scale(a: Tensor, c: float) -> Tensor:
    a = _as_tensor(a)
    c = float(c)

    def bw(g):
        _accum(a, g * c)

    return _make(a.data * c, (a,), bw)


def affine(a: Tensor, alpha: float, beta: float) -> Tensor:
    """alpha * a + beta, elementwise."""
    a = _as_tensor(a)
    alpha = float(alpha)

    def bw(g):
        _accum(a, g * alpha)

    return _make(alpha * a.data + beta, (a,), bw)


def neg(a: Tensor) -> Tensor:
    return scale(a, -1.0)


# ---------------------------------------------------------------------------
# nonlinearities

def relu(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    out_data = np.maximum(a.data, 0.0)

    def bw(g):
        _accum(a, g * (out_data > 0))

    return _make(out_data, (a,), bw)


def sigmoid(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    y = np.empty_like(a.data)
    pos = a.data >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-a.data[pos]))
    ey = np.exp(a.data[~pos])
    y[~pos] = ey / (1.0 + ey)

    def bw(g):
        _accum(a, g * y * (1.0 - y))

    return _make(y, (a,), bw)


def tanh(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    y = np.tanh(a.data)

    def bw(g):
        _accum(a, g * (1.0 - y * y))

    return _make(y, (a,), bw)


def exp(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    y = np.exp(a.data)

    def bw(g):
        _accum(a, g * y)

    return _make(y, (a,), bw)


def log(a: Tensor) -> Tensor:
    a = _as_tensor(a)

    def bw(g):
        _accum(a, g / a.data)

    return _make(np.log(a.data), (a,), bw)


def softplus(a: Tensor) -> Tensor:
    a = _as_tensor(a)

    def bw(g):
        _accum(a, g / (1.0 + np.exp(-a.data)))

    return _make(np.logaddexp(0.0, a.data), (a,), bw)


def softmax_rows(a: Tensor) -> Tensor:
    """Softmax along the last axis of a vector or matrix."""
    a = _as_tensor(a)
    if a.data.ndim not in (1, 2):
        raise ShapeError(f"softmax_rows expects 1-d or 2-d input, got {a.data.shape}")
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        _accum(a, y * (g - dot))

    return _make(y, (a,), bw)


# ---------------------------------------------------------------------------
# shape ops

def concat_rows(parts) -> Tensor:
    """Concatenate along axis 0 (vectors end-to-end, matrices stacked)."""
    parts = [_as_tensor(p) for p in parts]
    if not parts:
        raise ShapeError("concat_rows needs at least one part")
    ndim = parts[0].data.ndim
    if any(p.data.ndim != ndim for p in parts):
        raise ShapeError("concat_rows parts must share ndim")
    sizes = [p.data.shape[0] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        for p, s, e in zip(parts, offsets[:-1], offsets[1:]):
            _accum(p, g[s:e])

    return _make(np.concatenate([p.data for p in parts], axis=0), tuple(parts), bw)


def stack_rows(rows) -> Tensor:
    """Stack 1-d tensors into a matrix, one per row."""
    rows = [_as_tensor(r) for r in rows]

    def bw(g):
        for i, r in enumerate(rows):
            _accum(r, g[i])

    return _make(np.stack([r.data for r in rows], axis=0), tuple(rows), bw)


def mean_rows(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError(f"mean_rows expects a matrix, got {a.data.shape}")
    n = a.data.shape[0]

    def bw(g):
        _accum(a, np.tile(g / n, (n, 1)))

    return _make(a.data.mean(axis=0), (a,), bw)


def sum_rows(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError(f"sum_rows expects a matrix, got {a.data.shape}")
    n = a.data.shape[0]

    def bw(g):
        _accum(a, np.tile(g, (n, 1)))

    return _make(a.data.sum(axis=0), (a,), bw)


def sum_all(a: Tensor) -> Tensor:
    a = _as_tensor(a)

    def bw(g):
        _accum(a, np.full_like(a.data, float(g)))

    return _make(a.data.sum(), (a,), bw)


def mean_all(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    n = a.data.size

    def bw(g):
        _accum(a, np.full_like(a.data, float(g) / n))

    return _make(a.data.mean(), (a,), bw)


def gather(a: Tensor, idx) -> Tensor:
    """Pick entries of a vector: out[k] = a[idx[k]]."""
    a = _as_tensor(a)
    idx = np.asarray(idx, dtype=np.intp)
    if a.data.ndim != 1:
        raise ShapeError(f"gather expects a vector, got {a.data.shape}")

    def bw(g):
        da = np.zeros_like(a.data)
        np.add.at(da, idx, g)
        _accum(a, da)

    return _make(a.data[idx], (a,), bw)


def take_rows(a: Tensor, idx) -> Tensor:
    a = _as_tensor(a)
    idx = np.asarray(idx, dtype=np.intp)
    if a.data.ndim != 2:
        raise ShapeError(f"take_rows expects a matrix, got {a.data.shape}")

    def bw(g):
        da = np.zeros_like(a.data)
        np.add.at(da, idx, g)
        _accum(a, da)

    return _make(a.data[idx], (a,), bw)


def take_col(a: Tensor, j: int) -> Tensor:
    a = _as_tensor(a)
    j = int(j)

    def bw(g):
        da = np.zeros_like(a.data)
        da[:, j] = g
        _accum(a, da)

    return _make(a.data[:, j].copy(), (a,), bw)


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    a = _as_tensor(a)

    def bw(g):
        da = np.zeros_like(a.data)
        da[start:stop] = g
        _accum(a, da)

    return _make(a.data[start:stop].copy(), (a,), bw)


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError(f"slice_cols expects a matrix, got {a.data.shape}")

    def bw(g):
        da = np.zeros_like(a.data)
        da[:, start:stop] = g
        _accum(a, da)

    return _make(a.data[:, start:stop].copy(), (a,), bw)


def pick(a: Tensor, rows, cols) -> Tensor:
    """Pick matrix entries: out[k] = a[rows[k], cols[k]]."""
    a = _as_tensor(a)
    rows = np.asarray(rows, dtype=np.intp)
    cols = np.asarray(cols, dtype=np.intp)
    if a.data.ndim != 2:
        raise ShapeError(f"pick expects a matrix, got {a.data.shape}")

    def bw(g):
        da = np.zeros_like(a.data)
        np.add.at(da, (rows, cols), g)
        _accum(a, da)

    return _make(a.data[rows, cols], (a,), bw)


def div_rows(a: Tensor, v: Tensor) -> Tensor:
    """Divide each row of a matrix by the matching entry of a vector."""
    a, v = _as_tensor(a), _as_tensor(v)
    if a.data.ndim != 2 or v.data.ndim != 1 or a.data.shape[0] != v.data.shape[0]:
        raise ShapeError(f"div_rows shapes incompatible: {a.data.shape} / {v.data.shape}")
    vd = v.data[:, None]
    out_data = a.data / vd

    def bw(g):
        _accum(a, g / vd)
        _accum(v, -(g * out_data).sum(axis=1) / v.data)

    return _make(out_data, (a, v), bw)


def pairwise_sqdist(h: Tensor) -> Tensor:
    """All-pairs squared euclidean distances between the rows of a matrix."""
    h = _as_tensor(h)
    if h.data.ndim != 2:
        raise ShapeError(f"pairwise_sqdist expects a matrix, got {h.data.shape}")
    hd = h.data
    sq = (hd * hd).sum(axis=1)
    d = np.maximum(sq[:, None] + sq[None, :] - 2.0 * (hd @ hd.T), 0.0)
    np.fill_diagonal(d, 0.0)

    def bw(g):
        s = g + g.T
        _accum(h, 2.0 * (s.sum(axis=1)[:, None] * hd - s @ hd))

    return _make(d, (h,), bw)


def block_diag(blocks, tail_identity: bool = False) -> Tensor:
    """Assemble a block-diagonal matrix, optionally with a 1x1 identity tail."""
    blocks = [_as_tensor(b) for b in blocks]
    if any(b.data.ndim != 2 for b in blocks):
        raise ShapeError("block_diag expects matrices")
    rows = [b.data.shape[0] for b in blocks]
    cols = [b.data.shape[1] for b in blocks]
    extra = 1 if tail_identity else 0
    out_data = np.zeros((sum(rows) + extra, sum(cols) + extra))
    r0 = np.cumsum([0] + rows)
    c0 = np.cumsum([0] + cols)
    for b, r, c in zip(blocks, r0[:-1], c0[:-1]):
        out_data[r:r + b.data.shape[0], c:c + b.data.shape[1]] = b.data
    if tail_identity:
        out_data[-1, -1] = 1.0

    def bw(g):
        for b, r, c in zip(blocks, r0[:-1], c0[:-1]):
            _accum(b, g[r:r + b.data.shape[0], c:c + b.data.shape[1]])

    return _make(out_data, tuple(blocks), bw)


# ---------------------------------------------------------------------------
# kind-dispatch surface

_OP_TABLE = {
    "matmul": matmul,
    "add": add,
    "scale": scale,
    "relu": relu,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "softmax-rows": softmax_rows,
    "concat-rows": lambda *inputs: concat_rows(inputs),
    "mean-rows": mean_rows,
    "sum-rows": sum_rows,
    "mul": mul,
    "exp": exp,
    "log": log,
    "softplus": softplus,
    "sum": sum_all,
}


def forward_op(kind: str, inputs, **kwargs) -> Tensor:
    """Apply an op by kind name; shape errors carry a diagnostic message."""
    try:
        fn = _OP_TABLE[kind]
    except KeyError:
        raise ValueError(f"unknown op kind {kind!r}") from None
    return fn(*inputs, **kwargs)
