"""Reverse-mode automatic differentiation over dense float64 arrays.

Only what the models in this package need is provided: dense and
sparse-times-dense products, a handful of elementwise maps, reductions,
row gathering, the training losses, Glorot initialisation and Adam.

Gradients are accumulated on leaf tensors only; intermediate results keep
their gradient in a transient buffer during :meth:`Tensor.backward`.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.special import expit

from .errors import InvalidArgumentError, InvalidDataError, ShapeError, TrainingDivergedError

Rng = np.random.Generator

# logits are clipped here inside sigmoid and BCE; keeps outputs strictly in (0, 1)
LOGIT_CLIP = 30.0

_node_ids = itertools.count()


def make_rng(*keys: int) -> Rng:
    """Return a generator seeded from one or more integer keys.

    ``make_rng(seed, repeat, fold)`` gives an independent stream per
    (seed, repeat, fold) triple.
    """
    return np.random.default_rng([int(k) for k in keys])


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "node_id", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad=False, _parents=(), _backward_fn=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.node_id = next(_node_ids)
        self._parents = _parents
        self._backward_fn = _backward_fn

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def is_leaf(self):
        return not self._parents

    @property
    def T(self):
        return transpose(self)

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = np.zeros_like(self.data) if self.requires_grad else None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def _accumulate(self, g):
        if not self.requires_grad:
            return
        g = np.asarray(g, dtype=np.float64).reshape(self.data.shape)
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad = self.grad + g

    def backward(self):
        if self.data.size != 1:
            raise InvalidArgumentError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            return
        order = _topological_order(self)
        pending = {self.node_id: np.ones_like(self.data)}
        for node in reversed(order):
            g = pending.pop(node.node_id, None)
            if g is None:
                continue
            if node.is_leaf:
                node._accumulate(g)
                continue
            for parent, pg in zip(node._parents, node._backward_fn(g)):
                if pg is None or not parent.requires_grad:
                    continue
                prev = pending.get(parent.node_id)
                pending[parent.node_id] = pg if prev is None else prev + pg

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other)))

    def __rsub__(self, other):
        return add(_as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self):
        return sum_all(self)

    def mean(self):
        return mean_all(self)


def _topological_order(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node.node_id in seen:
            continue
        seen.add(node.node_id)
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and parent.node_id not in seen:
                stack.append((parent, False))
    return order


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents, backward_fn):
    if any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward_fn=backward_fn)
    return Tensor(data)


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_same_shape(a, b, what):
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shapes {a.shape} and {b.shape} differ")


# ---------------------------------------------------------------------------
# sparse operand


class SparseMatrix:
    """Constant sparse matrix stored as (row, col, value) triplets.

    Triplets are kept sorted by (row, col) with no duplicates. A CSR copy is
    held for products.
    """

    def __init__(self, n_rows, n_cols, rows, cols, values, symmetric=False):
        rows = np.asarray(rows, dtype=np.int64).reshape(-1)
        cols = np.asarray(cols, dtype=np.int64).reshape(-1)
        values = np.asarray(values, dtype=np.float64).reshape(-1)
        if not (len(rows) == len(cols) == len(values)):
            raise ShapeError("rows, cols and values must have equal length")
        n_rows, n_cols = int(n_rows), int(n_cols)
        if len(rows):
            if rows.min() < 0 or rows.max() >= n_rows or cols.min() < 0 or cols.max() >= n_cols:
                raise InvalidDataError("sparse entry index out of range")
            if not np.all(np.isfinite(values)):
                raise InvalidDataError("sparse entries must be finite")
        order = np.lexsort((cols, rows))
        rows, cols, values = rows[order], cols[order], values[order]
        if len(rows) > 1:
            dup = (rows[1:] == rows[:-1]) & (cols[1:] == cols[:-1])
            if dup.any():
                i = int(np.flatnonzero(dup)[0])
                raise InvalidDataError(f"duplicate sparse entry ({rows[i]}, {cols[i]})")
        self.n_rows, self.n_cols = n_rows, n_cols
        self.rows, self.cols, self.values = rows, cols, values
        for arr in (self.rows, self.cols, self.values):
            arr.flags.writeable = False
        self._csr = sp.csr_matrix((values, (rows, cols)), shape=(n_rows, n_cols))
        self._csr_t = None
        if symmetric and not self.is_symmetric():
            raise InvalidDataError("matrix flagged symmetric is not symmetric")
        self.symmetric = bool(symmetric)

    @classmethod
    def from_dense(cls, a, symmetric=False):
        a = np.asarray(a, dtype=np.float64)
        rows, cols = np.nonzero(a)
        return cls(a.shape[0], a.shape[1], rows, cols, a[rows, cols], symmetric=symmetric)

    @classmethod
    def from_scipy(cls, m, symmetric=False):
        m = sp.coo_matrix(m)
        m.sum_duplicates()
        keep = m.data != 0
        return cls(m.shape[0], m.shape[1], m.row[keep], m.col[keep], m.data[keep], symmetric=symmetric)

    @classmethod
    def identity(cls, n):
        idx = np.arange(n)
        return cls(n, n, idx, idx, np.ones(n), symmetric=True)

    @property
    def shape(self):
        return (self.n_rows, self.n_cols)

    @property
    def nnz(self):
        return len(self.values)

    def to_csr(self):
        return self._csr

    def to_dense(self):
        return self._csr.toarray()

    def transpose_csr(self):
        if self._csr_t is None:
            self._csr_t = self._csr.T.tocsr()
        return self._csr_t

    def is_symmetric(self):
        if self.n_rows != self.n_cols:
            return False
        diff = self._csr - self._csr.T
        return diff.nnz == 0 or not np.any(diff.data)

    def submatrix(self, index):
        """Induced submatrix on ``index`` (rows and columns, in that order)."""
        index = np.asarray(index, dtype=np.int64)
        sub = self._csr[index][:, index]
        return SparseMatrix.from_scipy(sub, symmetric=self.symmetric)

    def __eq__(self, other):
        if not isinstance(other, SparseMatrix):
            return NotImplemented
        return (self.shape == other.shape and np.array_equal(self.rows, other.rows)
                and np.array_equal(self.cols, other.cols) and np.array_equal(self.values, other.values))

    __hash__ = None

    def __repr__(self):
        return f"SparseMatrix(shape={self.shape}, nnz={self.nnz})"


# ---------------------------------------------------------------------------
# differentiable operations


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise ShapeError(f"add: cannot broadcast {a.shape} with {b.shape}") from exc
    return _result(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError as exc:
        raise ShapeError(f"mul: cannot broadcast {a.shape} with {b.shape}") from exc
    return _result(out, (a, b), lambda g: (_unbroadcast(g * b.data, a.shape),
                                           _unbroadcast(g * a.data, b.shape)))


def neg(a):
    return _result(-a.data, (a,), lambda g: (-g,))


def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return _result(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def spmm(s: SparseMatrix, d):
    """Sparse-times-dense product; ``s`` is constant data and gets no gradient."""
    d = _as_tensor(d)
    if d.ndim != 2 or s.n_cols != d.shape[0]:
        raise ShapeError(f"spmm: incompatible shapes {s.shape} and {d.shape}")
    out = np.asarray(s.to_csr() @ d.data)
    return _result(out, (d,), lambda g: (np.asarray(s.transpose_csr() @ g),))


def transpose(a):
    if a.ndim != 2:
        raise ShapeError("transpose expects a matrix")
    return _result(a.data.T.copy(), (a,), lambda g: (g.T,))


def relu(x):
    mask = x.data > 0
    return _result(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def sigmoid(x):
    out = expit(np.clip(x.data, -LOGIT_CLIP, LOGIT_CLIP))
    return _result(out, (x,), lambda g: (g * out * (1.0 - out),))


def activate(x, kind):
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise InvalidArgumentError(f"unknown activation {kind!r}")


def exp(x):
    out = np.exp(x.data)
    return _result(out, (x,), lambda g: (g * out,))


def square(x):
    return _result(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,))


def clip(x, lo, hi):
    """Clamp to [lo, hi]; gradient is blocked where the clamp is active."""
    inside = (x.data >= lo) & (x.data <= hi)
    return _result(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,))


def sum_all(x):
    return _result(np.array(x.data.sum()), (x,), lambda g: (np.full(x.shape, float(g)),))


def mean_all(x):
    n = x.data.size
    return _result(np.array(x.data.mean()), (x,), lambda g: (np.full(x.shape, float(g) / n),))


def take_rows(x, index):
    """Gather rows ``x[index]``; the gradient scatters back with accumulation."""
    index = np.asarray(index, dtype=np.int64)
    if x.ndim != 2:
        raise ShapeError("take_rows expects a matrix")

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        return (full,)

    return _result(x.data[index], (x,), backward)


def linear(x, w, b=None):
    out = matmul(x, w)
    return out if b is None else add(out, b)


def dropout(x, p, training, rng: Rng | None = None):
    """Inverted dropout: survivors are scaled by 1/(1-p) at train time."""
    if not 0.0 <= p < 1.0:
        raise InvalidArgumentError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    if rng is None:
        raise InvalidArgumentError("dropout in training mode needs an rng")
    mask = (rng.random(x.shape) >= p) / (1.0 - p)
    return _result(x.data * mask, (x,), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# losses


def _softplus(x):
    return np.logaddexp(0.0, x)


def weighted_bce_with_logits(logits, targets, pos_weight=1.0, mask=None):
    """Mean of -[w*y*log s(l) + (1-y)*log(1-s(l))] over (masked) elements.

    Logits are clipped to +-LOGIT_CLIP. ``mask`` is an optional 0/1 array of
    the same shape selecting which entries enter the mean.
    """
    targets = np.asarray(targets.data if isinstance(targets, Tensor) else targets, dtype=np.float64)
    if logits.shape != targets.shape:
        raise ShapeError(f"bce: logits {logits.shape} vs targets {targets.shape}")
    if pos_weight < 0:
        raise InvalidArgumentError("pos_weight must be non-negative")
    z = np.clip(logits.data, -LOGIT_CLIP, LOGIT_CLIP)
    inside = (logits.data >= -LOGIT_CLIP) & (logits.data <= LOGIT_CLIP)
    elem = pos_weight * targets * _softplus(-z) + (1.0 - targets) * _softplus(z)
    if mask is None:
        count = elem.size
    else:
        mask = np.asarray(mask, dtype=np.float64)
        if mask.shape != elem.shape:
            raise ShapeError("bce: mask shape differs from logits")
        elem = elem * mask
        count = mask.sum()
    count = max(float(count), 1.0)
    s = expit(z)

    def backward(g):
        d = pos_weight * targets * (s - 1.0) + (1.0 - targets) * s
        if mask is not None:
            d = d * mask
        return (float(g) * d * inside / count,)

    return _result(np.array(elem.sum() / count), (logits,), backward)


def mse_loss(pred, target):
    target = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeError(f"mse: pred {pred.shape} vs target {target.shape}")
    diff = pred.data - target
    n = diff.size
    return _result(np.array(np.mean(diff * diff)), (pred,), lambda g: (float(g) * 2.0 * diff / n,))


def softmax_cross_entropy(logits, labels):
    """Mean categorical cross-entropy of integer ``labels`` under ``logits``."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError("cross-entropy: expects (n, C) logits and n labels")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1))
    n = len(labels)
    rows = np.arange(n)
    loss = np.mean(logz - shifted[rows, labels])

    def backward(g):
        probs = np.exp(shifted - logz[:, None])
        probs[rows, labels] -= 1.0
        return (float(g) * probs / n,)

    return _result(np.array(loss), (logits,), backward)


# ---------------------------------------------------------------------------
# initialisation and sampling


def glorot_init(fan_in, fan_out, rng: Rng) -> Tensor:
    if fan_in < 1 or fan_out < 1:
        raise InvalidArgumentError("fans must be >= 1")
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-limit, limit, size=(fan_in, fan_out)), requires_grad=True)


def zeros(*shape, requires_grad=True) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


def sample_gaussian(shape, rng: Rng) -> Tensor:
    return Tensor(rng.standard_normal(size=shape))


# ---------------------------------------------------------------------------
# optimiser


@dataclass
class AdamState:
    lr: float = 0.005
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params, grads, state: AdamState):
    """One bias-corrected Adam update applied to ``params`` in place."""
    if state.lr <= 0:
        raise InvalidArgumentError("learning rate must be positive")
    if len(params) != len(grads):
        raise ShapeError("params and grads differ in length")
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise TrainingDivergedError("non-finite gradient")
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g.shape != p.shape:
            raise ShapeError(f"gradient shape {g.shape} differs from parameter {p.shape}")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p.data -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return params, state


class Adam:
    """Adam over a fixed parameter list; missing gradients count as zero."""

    def __init__(self, params, lr=0.005, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.state = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        adam_step(self.params, grads, self.state)
