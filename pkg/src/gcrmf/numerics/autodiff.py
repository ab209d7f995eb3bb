"""Reverse-mode differentiation over dense float64 numpy arrays.

Every primitive is a :class:`Function` subclass with an explicit ``forward``
on raw arrays and a hand-derived ``backward`` mapping the upstream gradient
to one gradient per input. ``Function.apply`` wires the result into the
graph of :class:`Tensor` nodes; :meth:`Tensor.backward` walks it in reverse
topological order. There is no global tape, so independent forward passes
never share state.
"""
from __future__ import annotations

import numpy as np

from ..errors import DimensionError, DomainError, NumericError

DTYPE = np.float64
COSINE_EPS = 1e-12


class Tensor:
    __slots__ = ("value", "grad", "requires_grad", "_fn", "_inputs", "name")

    def __init__(self, value, requires_grad=False, name=None):
        self.value = np.asarray(value, dtype=DTYPE)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._fn = None
        self._inputs = ()
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def numpy(self):
        return self.value

    def detach(self):
        return Tensor(self.value.copy())

    def __repr__(self):
        tag = f" {self.name}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    @property
    def T(self):
        return transpose(self)

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
        if grad is None:
            if self.value.size != 1:
                raise DimensionError("backward() without a seed needs a scalar output")
            grad = np.ones_like(self.value)
        order = _topological(self)
        grads = {id(self): np.asarray(grad, dtype=DTYPE)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._fn is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            in_grads = node._fn.backward(g)
            for inp, gi in zip(node._inputs, in_grads):
                if gi is None or not inp.requires_grad:
                    continue
                if gi.shape != inp.value.shape:
                    raise DimensionError(
                        f"{type(node._fn).__name__}.backward returned {gi.shape}, expected {inp.value.shape}"
                    )
                key = id(inp)
                grads[key] = gi if key not in grads else grads[key] + gi


def _topological(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for inp in node._inputs:
            if inp.requires_grad and id(inp) not in seen:
                stack.append((inp, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def check_finite(t, what="tensor"):
    """Checkpoint guard: raise :class:`NumericError` on NaN/Inf."""
    value = t.value if isinstance(t, Tensor) else np.asarray(t)
    if not np.all(np.isfinite(value)):
        raise NumericError(f"non-finite values in {what}")
    return t


class Function:
    """A differentiable primitive.

    Subclasses implement ``forward(*arrays) -> array`` (stashing whatever the
    backward pass needs on ``self``) and ``backward(g) -> tuple`` with one
    entry per input (``None`` for non-differentiable inputs).
    """

    def forward(self, *xs):
        raise NotImplementedError

    def backward(self, g):
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs, **kwargs):
        fn = cls(**kwargs)
        tensors = tuple(as_tensor(x) for x in inputs)
        out = Tensor(fn.forward(*(t.value for t in tensors)))
        if any(t.requires_grad for t in tensors):
            out.requires_grad = True
            out._fn = fn
            out._inputs = tensors
        return out


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise DimensionError(f"shapes {a.shape} and {b.shape} do not broadcast") from exc


# -- arithmetic -------------------------------------------------------------


class Add(Function):
    def forward(self, a, b):
        _broadcast_shape(a, b)
        self.shapes = (a.shape, b.shape)
        return a + b

    def backward(self, g):
        return _unbroadcast(g, self.shapes[0]), _unbroadcast(g, self.shapes[1])


class Sub(Function):
    def forward(self, a, b):
        _broadcast_shape(a, b)
        self.shapes = (a.shape, b.shape)
        return a - b

    def backward(self, g):
        return _unbroadcast(g, self.shapes[0]), _unbroadcast(-g, self.shapes[1])


class Mul(Function):
    def forward(self, a, b):
        _broadcast_shape(a, b)
        self.a, self.b = a, b
        return a * b

    def backward(self, g):
        return _unbroadcast(g * self.b, self.a.shape), _unbroadcast(g * self.a, self.b.shape)


class Neg(Function):
    def forward(self, a):
        return -a

    def backward(self, g):
        return (-g,)


class Scale(Function):
    """Multiply by a constant scalar."""

    def __init__(self, c):
        self.c = float(c)

    def forward(self, a):
        return a * self.c

    def backward(self, g):
        return (g * self.c,)


class MatMul(Function):
    """Matrix/vector products: (m,k)@(k,n), (m,k)@(k,), (k,)@(k,n), (k,)@(k,)."""

    def forward(self, a, b):
        if a.ndim not in (1, 2) or b.ndim not in (1, 2) or a.shape[-1] != b.shape[0]:
            raise DimensionError(f"matmul shapes {a.shape} @ {b.shape}")
        self.a, self.b = a, b
        return a @ b

    def backward(self, g):
        a, b = self.a, self.b
        if a.ndim == 2 and b.ndim == 2:
            return g @ b.T, a.T @ g
        if a.ndim == 2:  # matvec
            return np.outer(g, b), a.T @ g
        if b.ndim == 2:  # vecmat
            return b @ g, np.outer(a, g)
        return g * b, g * a


class Transpose(Function):
    def forward(self, a):
        return a.T

    def backward(self, g):
        return (g.T,)


class Reshape(Function):
    def __init__(self, shape):
        self.shape = shape

    def forward(self, a):
        self.in_shape = a.shape
        return a.reshape(self.shape)

    def backward(self, g):
        return (g.reshape(self.in_shape),)


class Concat(Function):
    def __init__(self, axis=0):
        self.axis = axis

    def forward(self, *xs):
        try:
            out = np.concatenate(xs, axis=self.axis)
        except ValueError as exc:
            raise DimensionError(str(exc)) from exc
        self.splits = np.cumsum([x.shape[self.axis] for x in xs])[:-1]
        return out

    def backward(self, g):
        return tuple(np.split(g, self.splits, axis=self.axis))


class Stack(Function):
    def __init__(self, axis=0):
        self.axis = axis

    def forward(self, *xs):
        try:
            return np.stack(xs, axis=self.axis)
        except ValueError as exc:
            raise DimensionError(str(exc)) from exc

    def backward(self, g):
        return tuple(np.moveaxis(g, self.axis, 0))


class Index(Function):
    """Numpy indexing (basic or advanced); backward scatters with ``np.add.at``."""

    def __init__(self, idx):
        self.idx = idx

    def forward(self, a):
        self.in_shape = a.shape
        return a[self.idx]

    def backward(self, g):
        out = np.zeros(self.in_shape, dtype=DTYPE)
        np.add.at(out, self.idx, g)
        return (out,)


class SegmentSum(Function):
    """Row-wise scatter-add: ``out[s] = sum of rows r with segment[r] == s``."""

    def __init__(self, segments, n_segments):
        self.segments = np.asarray(segments, dtype=np.int64)
        self.n = int(n_segments)

    def forward(self, x):
        if x.shape[0] != self.segments.shape[0]:
            raise DimensionError("segment ids must align with rows")
        out = np.zeros((self.n,) + x.shape[1:], dtype=DTYPE)
        np.add.at(out, self.segments, x)
        return out

    def backward(self, g):
        return (g[self.segments],)


class Where(Function):
    """Select ``a`` where the constant mask is true, else ``b``."""

    def __init__(self, cond):
        self.cond = np.asarray(cond, dtype=bool)

    def forward(self, a, b):
        self.shapes = (a.shape, b.shape)
        return np.where(self.cond, a, b)

    def backward(self, g):
        return (
            _unbroadcast(np.where(self.cond, g, 0.0), self.shapes[0]),
            _unbroadcast(np.where(self.cond, 0.0, g), self.shapes[1]),
        )


class SpMM(Function):
    """Constant (sparse or dense) matrix times a differentiable dense matrix."""

    def __init__(self, matrix):
        self.matrix = matrix

    def forward(self, x):
        if self.matrix.shape[1] != x.shape[0]:
            raise DimensionError(f"spmm shapes {self.matrix.shape} @ {x.shape}")
        return np.asarray(self.matrix @ x, dtype=DTYPE)

    def backward(self, g):
        return (np.asarray(self.matrix.T @ g, dtype=DTYPE),)


# -- reductions ---------------------------------------------------------------


class Sum(Function):
    def __init__(self, axis=None):
        self.axis = axis

    def forward(self, a):
        self.in_shape = a.shape
        return np.sum(a, axis=self.axis)

    def backward(self, g):
        if self.axis is not None:
            g = np.expand_dims(g, self.axis)
        return (np.broadcast_to(g, self.in_shape).astype(DTYPE),)


class Mean(Function):
    def __init__(self, axis=None):
        self.axis = axis

    def forward(self, a):
        self.in_shape = a.shape
        self.count = a.size if self.axis is None else a.shape[self.axis]
        return np.mean(a, axis=self.axis)

    def backward(self, g):
        if self.axis is not None:
            g = np.expand_dims(g, self.axis)
        return (np.broadcast_to(g / self.count, self.in_shape).astype(DTYPE),)


class L2NormSq(Function):
    """Sum of squares, over everything or along ``axis``."""

    def __init__(self, axis=None):
        self.axis = axis

    def forward(self, a):
        self.a = a
        return np.sum(a * a, axis=self.axis)

    def backward(self, g):
        if self.axis is not None:
            g = np.expand_dims(g, self.axis)
        return (2.0 * g * self.a,)


# -- elementwise nonlinearities ------------------------------------------------


class LeakyReLU(Function):
    def __init__(self, slope=0.2):
        self.slope = float(slope)

    def forward(self, a):
        self.pos = a > 0
        return np.where(self.pos, a, self.slope * a)

    def backward(self, g):
        return (np.where(self.pos, g, self.slope * g),)


class ReLU(Function):
    def forward(self, a):
        self.pos = a > 0
        return np.where(self.pos, a, 0.0)

    def backward(self, g):
        return (np.where(self.pos, g, 0.0),)


class Tanh(Function):
    def forward(self, a):
        self.out = np.tanh(a)
        return self.out

    def backward(self, g):
        return (g * (1.0 - self.out**2),)


def _sigmoid(a):
    a = np.asarray(a, dtype=DTYPE)
    e = np.exp(-np.abs(a))
    return np.where(a >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


class Sigmoid(Function):
    def forward(self, a):
        self.out = _sigmoid(a)
        return self.out

    def backward(self, g):
        return (g * self.out * (1.0 - self.out),)


class Exp(Function):
    def forward(self, a):
        self.out = np.exp(a)
        return self.out

    def backward(self, g):
        return (g * self.out,)


class Log(Function):
    def forward(self, a):
        if np.any(a <= 0):
            raise DomainError("log of a nonpositive value")
        self.a = a
        return np.log(a)

    def backward(self, g):
        return (g / self.a,)


class Softplus(Function):
    def forward(self, a):
        self.a = a
        return np.logaddexp(0.0, a)

    def backward(self, g):
        return (g * _sigmoid(self.a),)


# -- normalizers ----------------------------------------------------------------


class Softmax(Function):
    """Softmax along ``axis``; entries with ``mask == False`` get probability 0.

    A fully masked slice yields all zeros.
    """

    def __init__(self, axis=-1, mask=None):
        self.axis = axis
        self.mask = None if mask is None else np.asarray(mask, dtype=bool)

    def forward(self, a):
        if a.size == 0 or a.shape[self.axis] == 0:
            raise DomainError("softmax over an empty input")
        if self.mask is not None:
            a = np.where(self.mask, a, -np.inf)
        m = np.max(a, axis=self.axis, keepdims=True)
        m = np.where(np.isfinite(m), m, 0.0)
        e = np.exp(a - m)
        s = np.sum(e, axis=self.axis, keepdims=True)
        self.out = np.divide(e, s, out=np.zeros_like(e), where=s > 0)
        return self.out

    def backward(self, g):
        y = self.out
        return (y * (g - np.sum(g * y, axis=self.axis, keepdims=True)),)


class LogSoftmax(Function):
    def __init__(self, axis=-1):
        self.axis = axis

    def forward(self, a):
        if a.size == 0 or a.shape[self.axis] == 0:
            raise DomainError("log-softmax over an empty input")
        m = np.max(a, axis=self.axis, keepdims=True)
        lse = m + np.log(np.sum(np.exp(a - m), axis=self.axis, keepdims=True))
        out = a - lse
        self.soft = np.exp(out)
        return out

    def backward(self, g):
        return (g - self.soft * np.sum(g, axis=self.axis, keepdims=True),)


class SegmentSoftmax(Function):
    """Softmax of a 1-D score vector within each segment (e.g. each neighborhood)."""

    def __init__(self, segments, n_segments):
        self.segments = np.asarray(segments, dtype=np.int64)
        self.n = int(n_segments)

    def forward(self, a):
        if a.ndim != 1 or a.shape[0] != self.segments.shape[0]:
            raise DimensionError("segment softmax expects a 1-D vector aligned with segments")
        seg = self.segments
        m = np.full(self.n, -np.inf)
        np.maximum.at(m, seg, a)
        e = np.exp(a - m[seg])
        s = np.zeros(self.n)
        np.add.at(s, seg, e)
        self.out = e / s[seg]
        return self.out

    def backward(self, g):
        y, seg = self.out, self.segments
        dot = np.zeros(self.n)
        np.add.at(dot, seg, g * y)
        return (y * (g - dot[seg]),)


class CosineSim(Function):
    """Cosine similarity of two vectors, or row-wise for two matrices.

    Norms carry an additive ``COSINE_EPS`` guard so zero vectors give 0.
    """

    def forward(self, a, b):
        if a.shape != b.shape or a.ndim not in (1, 2):
            raise DimensionError(f"cosine_sim shapes {a.shape} vs {b.shape}")
        self.a, self.b = a, b
        self.na = np.linalg.norm(a, axis=-1) + COSINE_EPS
        self.nb = np.linalg.norm(b, axis=-1) + COSINE_EPS
        self.dot = np.sum(a * b, axis=-1)
        self.zero_norm = bool(np.any(self.na <= 2 * COSINE_EPS) or np.any(self.nb <= 2 * COSINE_EPS))
        return self.dot / (self.na * self.nb)

    def backward(self, g):
        a, b, na, nb, dot = self.a, self.b, self.na, self.nb, self.dot
        g = np.expand_dims(g, -1)
        na_, nb_, dot_ = (np.expand_dims(x, -1) for x in (na, nb, dot))
        # d||a||/da = a/(||a||) (the eps guard shifts the value, not the direction)
        ra = np.linalg.norm(a, axis=-1, keepdims=True)
        rb = np.linalg.norm(b, axis=-1, keepdims=True)
        ua = np.divide(a, ra, out=np.zeros_like(a), where=ra > 0)
        ub = np.divide(b, rb, out=np.zeros_like(b), where=rb > 0)
        ga = g * (b / (na_ * nb_) - dot_ * ua / (na_**2 * nb_))
        gb = g * (a / (na_ * nb_) - dot_ * ub / (na_ * nb_**2))
        return ga, gb


class BinaryCrossEntropy(Function):
    """Mean binary cross-entropy of probabilities ``p`` against constant 0/1 targets."""

    def __init__(self, targets, eps=1e-15):
        self.y = np.asarray(targets, dtype=DTYPE)
        self.eps = eps

    def forward(self, p):
        if p.shape != self.y.shape:
            raise DimensionError(f"probabilities {p.shape} vs targets {self.y.shape}")
        self.p = np.clip(p, self.eps, 1.0 - self.eps)
        y = self.y
        return np.mean(-(y * np.log(self.p) + (1.0 - y) * np.log(1.0 - self.p)))

    def backward(self, g):
        p, y = self.p, self.y
        return (g * (p - y) / (p * (1.0 - p)) / y.size,)


class BCEWithLogits(Function):
    """Mean binary cross-entropy evaluated from logits (numerically stable)."""

    def __init__(self, targets, weights=None):
        self.y = np.asarray(targets, dtype=DTYPE)
        self.w = None if weights is None else np.asarray(weights, dtype=DTYPE)

    def forward(self, z):
        if z.shape != self.y.shape:
            raise DimensionError(f"logits {z.shape} vs targets {self.y.shape}")
        self.z = z
        per = np.logaddexp(0.0, z) - self.y * z
        w = np.ones_like(per) if self.w is None else self.w
        self.norm = w.sum()
        return np.sum(w * per) / self.norm

    def backward(self, g):
        w = np.ones_like(self.z) if self.w is None else self.w
        return (g * w * (_sigmoid(self.z) - self.y) / self.norm,)


class SoftmaxCrossEntropy(Function):
    """Mean categorical cross-entropy of row logits against constant class ids."""

    def __init__(self, targets):
        self.y = np.asarray(targets, dtype=np.int64)

    def forward(self, z):
        if z.ndim != 2 or z.shape[0] != self.y.shape[0]:
            raise DimensionError(f"logits {z.shape} vs targets {self.y.shape}")
        m = z.max(axis=1, keepdims=True)
        lse = m[:, 0] + np.log(np.exp(z - m).sum(axis=1))
        self.soft = np.exp(z - lse[:, None])
        return np.mean(lse - z[np.arange(len(self.y)), self.y])

    def backward(self, g):
        d = self.soft.copy()
        d[np.arange(len(self.y)), self.y] -= 1.0
        return (g * d / len(self.y),)


# -- functional surface -------------------------------------------------------------


def add(a, b):
    return Add.apply(a, b)


def sub(a, b):
    return Sub.apply(a, b)


def mul(a, b):
    return Mul.apply(a, b)


def neg(a):
    return Neg.apply(a)


def scale(a, c):
    return Scale.apply(a, c=c)


def matmul(a, b):
    return MatMul.apply(a, b)


def matvec(w, x):
    if as_tensor(w).ndim != 2 or as_tensor(x).ndim != 1:
        raise DimensionError("matvec expects a matrix and a vector")
    return MatMul.apply(w, x)


def transpose(a):
    return Transpose.apply(a)


def reshape(a, shape):
    return Reshape.apply(a, shape=shape)


def concat(xs, axis=0):
    return Concat.apply(*xs, axis=axis)


def stack(xs, axis=0):
    return Stack.apply(*xs, axis=axis)


def index(a, idx):
    return Index.apply(a, idx=idx)


def gather_rows(a, rows):
    return Index.apply(a, idx=np.asarray(rows, dtype=np.int64))


def segment_sum(x, segments, n_segments):
    return SegmentSum.apply(x, segments=segments, n_segments=n_segments)


def segment_softmax(x, segments, n_segments):
    return SegmentSoftmax.apply(x, segments=segments, n_segments=n_segments)


def where(cond, a, b):
    return Where.apply(a, b, cond=cond)


def spmm(matrix, x):
    return SpMM.apply(x, matrix=matrix)


def tsum(a, axis=None):
    return Sum.apply(a, axis=axis)


def mean(a, axis=None):
    return Mean.apply(a, axis=axis)


def l2_norm_sq(a, axis=None):
    return L2NormSq.apply(a, axis=axis)


def leaky_relu(a, slope=0.2):
    return LeakyReLU.apply(a, slope=slope)


def relu(a):
    return ReLU.apply(a)


def tanh(a):
    return Tanh.apply(a)


def sigmoid(a):
    return Sigmoid.apply(a)


def exp(a):
    return Exp.apply(a)


def log(a):
    return Log.apply(a)


def softplus(a):
    return Softplus.apply(a)


def softmax(a, axis=-1, mask=None):
    return Softmax.apply(a, axis=axis, mask=mask)


def log_softmax(a, axis=-1):
    return LogSoftmax.apply(a, axis=axis)


def cosine_sim(a, b):
    return CosineSim.apply(a, b)


def cross_entropy(p, targets):
    """Cross-entropy of probabilities: binary for 1-D ``p``, categorical for 2-D."""
    p = as_tensor(p)
    if p.ndim == 1:
        return BinaryCrossEntropy.apply(p, targets=targets)
    if p.ndim == 2:
        rows = np.arange(p.shape[0])
        picked = index(p, (rows, np.asarray(targets, dtype=np.int64)))
        return neg(mean(log(picked)))
    raise DimensionError("cross_entropy expects 1-D or 2-D probabilities")


def bce_with_logits(z, targets, weights=None):
    return BCEWithLogits.apply(z, targets=targets, weights=weights)


def softmax_cross_entropy(z, targets):
    return SoftmaxCrossEntropy.apply(z, targets=targets)
