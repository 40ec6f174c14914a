"""Dense linear-algebra and probability kernels with reverse-mode gradients.

A minimal tape: every differentiable operation returns a :class:`Tensor`
that records its parents and a vector-Jacobian closure. Calling
``backward()`` on a scalar result walks the tape once in reverse
topological order and writes ``.grad`` on every leaf that requires it.

Everything runs in float64. The engine supports exactly the operations
this package composes (elementwise arithmetic with broadcasting, matmul,
a few nonlinearities, reductions, row selection/concatenation, and an
SPD linear solve); it is not a general autodiff system.
"""

from __future__ import annotations

import math
import threading

import numpy as np
from scipy.linalg import cho_factor, cho_solve

LOG_FLOOR = 1e-12  # floor inside every log; keeps degenerate probabilities finite

_solve_stats = threading.local()


def spd_solve_count() -> int:
    """Linear solves performed by the current thread since the last reset."""
    return getattr(_solve_stats, "count", 0)


def reset_spd_solve_count() -> None:
    _solve_stats.count = 0


def _bump_solve_count() -> None:
    _solve_stats.count = getattr(_solve_stats, "count", 0) + 1


class Tensor:
    """Node in the computation graph wrapping a float64 ndarray."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad=False, _parents=(), _vjp=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._vjp = _vjp

    @property
    def shape(self):
        return self.data.shape

    @property
    def T(self):
        return transpose(self)

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self) -> None:
        """Reverse pass from a scalar node; overwrites ``.grad`` on leaves."""
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar tensor")
        topo = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._vjp is None:
                node.grad = g
                continue
            for parent, pg in zip(node._parents, node._vjp(g)):
                if pg is None or not parent.requires_grad:
                    continue
                acc = grads.get(id(parent))
                grads[id(parent)] = pg if acc is None else acc + pg

    # operator sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def constant(data) -> Tensor:
    """Leaf tensor outside the gradient path. Entries must be finite."""
    t = Tensor(data)
    if not np.all(np.isfinite(t.data)):
        raise ValueError("non-finite entries in tensor construction")
    return t


def parameter(data) -> Tensor:
    """Trainable leaf tensor. Entries must be finite."""
    t = Tensor(data, requires_grad=True)
    if not np.all(np.isfinite(t.data)):
        raise ValueError("non-finite entries in parameter construction")
    return t


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else constant(x)


def _make(data, parents, vjp) -> Tensor:
    if any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=tuple(parents), _vjp=vjp)
    return Tensor(data)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


# elementwise arithmetic ----------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _make(out, (a, b), vjp)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data

    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _make(out, (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def vjp(g):
        return (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        )

    return _make(out, (a, b), vjp)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def vjp(g):
        return (
            _unbroadcast(g / b.data, a.data.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape),
        )

    return _make(out, (a, b), vjp)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError("matmul expects 2-D operands")
    if a.data.shape[1] != b.data.shape[0]:
        raise ValueError(
            f"matmul dimension mismatch: {a.data.shape} @ {b.data.shape}"
        )
    out = a.data @ b.data

    def vjp(g):
        return g @ b.data.T, a.data.T @ g

    return _make(out, (a, b), vjp)


def transpose(a) -> Tensor:
    a = as_tensor(a)
    return _make(a.data.T, (a,), lambda g: (g.T,))


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    out = a.data ** p

    def vjp(g):
        return (g * p * a.data ** (p - 1),)

    return _make(out, (a,), vjp)


# nonlinearities -------------------------------------------------------

def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    out = np.log(a.data)
    return _make(out, (a,), lambda g: (g / a.data,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    out = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                   np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def vjp(g):
        return (g * out * (1.0 - out),)

    return _make(out, (a,), vjp)


def softplus(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    out = np.where(x > 30.0, x, np.log1p(np.exp(np.minimum(x, 30.0))))

    def vjp(g):
        s = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                     np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
        return (g * s,)

    return _make(out, (a,), vjp)


def clamp_min(a, floor: float) -> Tensor:
    """max(a, floor); gradient passes where a >= floor, zero below."""
    a = as_tensor(a)
    out = np.maximum(a.data, floor)
    mask = a.data >= floor
    return _make(out, (a,), lambda g: (g * mask,))


# reductions and shape ops --------------------------------------------

def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.data.shape).copy(),)

    return _make(out, (a,), vjp)


def tmean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else a.data.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    orig = a.data.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(orig),))


def concat(tensors, axis: int) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.data.shape[axis] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        slicer = [slice(None)] * g.ndim
        parts = []
        for lo, hi in zip(offsets[:-1], offsets[1:]):
            slicer[axis] = slice(lo, hi)
            parts.append(g[tuple(slicer)])
        return tuple(parts)

    return _make(out, ts, vjp)


def take_rows(a, indices) -> Tensor:
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.intp)
    out = a.data[idx]

    def vjp(g):
        z = np.zeros_like(a.data)
        np.add.at(z, idx, g)
        return (z,)

    return _make(out, (a,), vjp)


def repeat_rows(row, n: int) -> Tensor:
    """Tile a 1 x k tensor into n identical rows (gradient sums back)."""
    row = as_tensor(row)
    if row.data.ndim != 2 or row.data.shape[0] != 1:
        raise ValueError("repeat_rows expects a 1 x k tensor")
    return matmul(constant(np.ones((n, 1))), row)


# linear solve ---------------------------------------------------------

def spd_solve(m, ridge, b) -> Tensor:
    """Solve (M + ridge*I) X = B for symmetric positive definite M + ridge*I.

    Differentiable in M, ridge and B. The Cholesky factor from the forward
    pass is reused by the backward pass. With X = S^{-1} B and incoming
    gradient G:

        dB = S^{-1} G,   dM = -(S^{-1} G) X^T,   dridge = tr(dM).
    """
    m, ridge, b = as_tensor(m), as_tensor(ridge), as_tensor(b)
    M, B = m.data, b.data
    r = float(ridge.data)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ValueError(f"spd_solve expects a square matrix, got {M.shape}")
    if B.ndim != 2 or B.shape[0] != M.shape[0]:
        raise ValueError(
            f"spd_solve dimension mismatch: M {M.shape} vs B {B.shape}"
        )
    if not (np.all(np.isfinite(M)) and np.all(np.isfinite(B)) and math.isfinite(r)):
        raise ValueError("spd_solve: non-finite input")
    if r <= 0.0:
        raise ValueError(f"spd_solve: ridge must be positive, got {r}")
    scale = max(1.0, float(np.abs(M).max()) if M.size else 1.0)
    if M.size and float(np.abs(M - M.T).max()) > 1e-10 * scale:
        raise ValueError("spd_solve: matrix is not symmetric within 1e-10 relative")

    S = M + r * np.eye(M.shape[0])
    factor = cho_factor(S, lower=True, check_finite=False)
    X = cho_solve(factor, B, check_finite=False)
    _bump_solve_count()

    def vjp(g):
        gB = cho_solve(factor, g, check_finite=False)
        gM = -gB @ X.T
        gr = _unbroadcast(np.trace(gM).reshape(()), ridge.data.shape)
        return gM, gr, gB

    return _make(X, (m, ridge, b), vjp)


# probability kernels --------------------------------------------------

def softmax_rows(logits) -> Tensor:
    """Row-wise softmax. Exactly shift-invariant per row (stabilized by the
    detached row max, which cancels in the quotient)."""
    t = as_tensor(logits)
    if not np.all(np.isfinite(t.data)):
        raise ValueError("softmax_rows: non-finite logits")
    shift = constant(t.data.max(axis=1, keepdims=True))
    e = exp(sub(t, shift))
    return div(e, tsum(e, axis=1, keepdims=True))


def cross_entropy(probs, labels) -> Tensor:
    """Mean negative log probability of the true class.

    `probs` rows are expected to be stochastic (e.g. softmax output); logs
    are floored at LOG_FLOOR so degenerate rows stay finite.
    """
    p = as_tensor(probs)
    labels = np.asarray(labels, dtype=np.intp)
    n, k = p.data.shape
    if labels.shape != (n,):
        raise ValueError(f"labels shape {labels.shape} does not match {n} rows")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"label out of range [0, {k})")
    onehot = constant(np.eye(k)[labels])
    picked = tsum(mul(p, onehot), axis=1)
    return tmean(-log(clamp_min(picked, LOG_FLOOR)))


def shannon_entropy_rows(probs) -> Tensor:
    """Mean row entropy, -sum p ln p with 0 ln 0 = 0; lies in [0, ln(cols)]."""
    p = as_tensor(probs)
    plogp = mul(p, log(clamp_min(p, LOG_FLOOR)))
    return tmean(-tsum(plogp, axis=1))


def cosine_similarity(u, v) -> Tensor:
    """Cosine of the angle between two vectors; 0 if either has zero norm."""
    u, v = as_tensor(u), as_tensor(v)
    nu = float(np.linalg.norm(u.data))
    nv = float(np.linalg.norm(v.data))
    if nu == 0.0 or nv == 0.0:
        return constant(0.0)
    dot = tsum(mul(u, v))
    return div(dot, mul(sqrt(tsum(mul(u, u))), sqrt(tsum(mul(v, v)))))


def pairwise_sqdist(p, q) -> Tensor:
    """Squared Euclidean distances between rows of p (a x m) and q (b x m)."""
    p, q = as_tensor(p), as_tensor(q)
    if p.data.shape[1] != q.data.shape[1]:
        raise ValueError(
            f"pairwise_sqdist feature mismatch: {p.data.shape} vs {q.data.shape}"
        )
    pp = tsum(mul(p, p), axis=1, keepdims=True)
    qq = transpose(tsum(mul(q, q), axis=1, keepdims=True))
    cross = matmul(p, transpose(q))
    return clamp_min(add(sub(pp, mul(cross, 2.0)), qq), 0.0)
