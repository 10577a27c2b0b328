"""Dense tensors with define-by-run reverse-mode differentiation.

A forward pass records, for every result that depends on a differentiable
input, its parents and a closure mapping the upstream gradient to one
gradient per parent. :func:`backward` walks that record in reverse
topological order, deposits gradients on leaf tensors and then drops the
record.

Broadcasting is deliberately narrow: elementwise binary ops accept equal
shapes, or a 1-D vector whose length equals the trailing axis of the other
operand (one vector applied to every row). Anything else raises
:class:`~propulsion_lab.errors.DimensionError`.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

from . import kernels
from .errors import ContractError, DimensionError, UnsupportedDegreeError

DEFAULT_DTYPE = np.float64


class Tensor:
    def __init__(self, data, requires_grad=False, dtype=None, _parents=(), _backward=None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE if dtype is None else dtype)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = _parents
        self._backward = _backward

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
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self):
        return not self._parents

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0])

    def detach(self):
        return Tensor(self.data.copy(), dtype=self.data.dtype)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return ew_mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, k):
        return pow_int(self, k)


class Parameter(Tensor):
    """A named leaf tensor. ``trainable`` mirrors ``requires_grad``."""

    def __init__(self, data, name="", trainable=False, dtype=None, decay_center=0.0):
        super().__init__(data, requires_grad=trainable, dtype=dtype)
        self.name = name
        # value weight decay pulls toward; 1.0 for multiplicative scales
        self.decay_center = decay_center

    @property
    def trainable(self):
        return self.requires_grad

    @trainable.setter
    def trainable(self, value):
        self.requires_grad = bool(value)
        if not value:
            self.grad = None

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape}, trainable={self.trainable})"


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


_GRAD_ENABLED = True


class no_grad:
    """Context manager: results computed inside record no graph."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


def _result(data, parents, backward_fn):
    parents = tuple(parents)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, dtype=data.dtype, _parents=parents, _backward=backward_fn)
    return Tensor(data, dtype=data.dtype)


def _pair_shapes(a: Tensor, b: Tensor, opname: str) -> str:
    """Classify a binary elementwise pairing: 'same', 'row_b' or 'row_a'."""
    if a.shape == b.shape:
        return "same"
    if b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0]:
        return "row_b"
    if a.ndim == 1 and b.ndim >= 1 and b.shape[-1] == a.shape[0]:
        return "row_a"
    raise DimensionError(f"{opname}: incompatible shapes {a.shape} and {b.shape}")


def _reduce_to_vector(g):
    return g.reshape(-1, g.shape[-1]).sum(axis=0)


# ----------------------------------------------------------------------------
# elementwise
# ----------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    mode = _pair_shapes(a, b, "add")

    def back(g):
        ga = g if mode != "row_a" else _reduce_to_vector(g)
        gb = g if mode != "row_b" else _reduce_to_vector(g)
        return ga, gb

    return _result(a.data + b.data, (a, b), back)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    mode = _pair_shapes(a, b, "sub")

    def back(g):
        ga = g if mode != "row_a" else _reduce_to_vector(g)
        gb = -g if mode != "row_b" else -_reduce_to_vector(g)
        return ga, gb

    return _result(a.data - b.data, (a, b), back)


def ew_mul(a, b) -> Tensor:
    """Elementwise product; a length-d vector multiplies every row of an (..., d) operand."""
    a, b = as_tensor(a), as_tensor(b)
    mode = _pair_shapes(a, b, "ew_mul")
    ad, bd = a.data, b.data

    def back(g):
        ga = g * bd
        gb = g * ad
        if mode == "row_a":
            ga = _reduce_to_vector(ga)
        elif mode == "row_b":
            gb = _reduce_to_vector(gb)
        return ga, gb

    return _result(ad * bd, (a, b), back)


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _result(a.data * c, (a,), lambda g: (g * c,))


def add_const(a, c) -> Tensor:
    """``a + c`` for a constant array ``c`` (numpy broadcasting, no gradient to ``c``)."""
    a = as_tensor(a)
    c = np.asarray(c, dtype=a.dtype)
    out = a.data + c
    if out.shape != a.shape:
        raise DimensionError(f"add_const: constant of shape {c.shape} would reshape {a.shape}")
    return _result(out, (a,), lambda g: (g,))


def pow_int(a, k: int) -> Tensor:
    """Elementwise ``a**k`` for a non-negative integer degree ``k``."""
    if isinstance(k, bool) or not isinstance(k, (int, np.integer)) or k < 0:
        raise UnsupportedDegreeError(f"degree must be a non-negative integer, got {k!r}")
    a = as_tensor(a)
    k = int(k)
    ad = a.data

    def back(g):
        if k == 0:
            return (np.zeros_like(ad),)
        return (g * k * ad ** (k - 1),)

    return _result(ad**k, (a,), back)


def gelu(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    cdf = 0.5 * (1.0 + erf(x / math.sqrt(2.0)))
    pdf = np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)
    return _result(x * cdf, (a,), lambda g: (g * (cdf + x * pdf),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    y = np.tanh(a.data)
    return _result(y, (a,), lambda g: (g * (1.0 - y * y),))


def dropout(a, rate: float, rng: np.random.Generator | None, train: bool = True) -> Tensor:
    """Inverted dropout. Identity when ``train`` is false or ``rate`` is 0."""
    a = as_tensor(a)
    if not train or rate <= 0.0:
        return a
    keep = (rng.random(a.shape) >= rate).astype(a.dtype) / (1.0 - rate)
    return _result(a.data * keep, (a,), lambda g: (g * keep,))


# ----------------------------------------------------------------------------
# reductions and shape
# ----------------------------------------------------------------------------


def sum(a, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    a = as_tensor(a)
    shape = a.shape

    def back(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _result(np.sum(a.data, axis=axis), (a,), back)


def mean(a, axis=None) -> Tensor:
    a = as_tensor(a)
    count = a.size if axis is None else a.shape[axis]
    return scale(sum(a, axis=axis), 1.0 / count)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def permute(a, axes) -> Tensor:
    a = as_tensor(a)
    inv = np.argsort(axes)
    return _result(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def transpose(a) -> Tensor:
    """Swap the last two axes."""
    a = as_tensor(a)
    if a.ndim < 2:
        raise DimensionError(f"transpose needs at least 2 axes, got shape {a.shape}")
    return _result(np.swapaxes(a.data, -1, -2), (a,), lambda g: (np.swapaxes(g, -1, -2),))


def concat_rows(tensors: Sequence, axis=0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise DimensionError("concat_rows: nothing to concatenate")
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat_rows: {[t.shape for t in ts]}: {exc}") from None
    cuts = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _result(out, ts, lambda g: tuple(np.split(g, cuts, axis=axis)))


def take_rows(table, ids) -> Tensor:
    """Embedding lookup: ``table[ids]`` for an integer index array."""
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2:
        raise DimensionError(f"take_rows: table must be 2-D, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise DimensionError(f"take_rows: index out of range for table {table.shape}")

    def back(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return _result(table.data[ids], (table,), back)


# ----------------------------------------------------------------------------
# linear algebra and normalisation
# ----------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Matrix product. ``a`` may carry leading batch axes; ``b`` is shared (2-D) or batched alike."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs matrices, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner dimensions differ, {a.shape} x {b.shape}")
    if b.ndim > 2 and b.shape[:-2] != a.shape[:-2]:
        raise DimensionError(f"matmul: batch dimensions differ, {a.shape} x {b.shape}")
    ad, bd = a.data, b.data

    def back(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if bd.ndim == 2:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _result(ad @ bd, (a, b), back)


def softmax_rows(a) -> Tensor:
    """Softmax over the last axis."""
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (y * (g - np.sum(g * y, axis=-1, keepdims=True)),)

    return _result(y, (a,), back)


def layer_norm(a, eps=1e-5) -> Tensor:
    """Normalise the last axis to zero mean / unit variance (no affine part)."""
    a = as_tensor(a)
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    sigma = np.sqrt(np.mean(xc * xc, axis=-1, keepdims=True) + eps)
    y = xc / sigma

    def back(g):
        gm = g.mean(axis=-1, keepdims=True)
        gy = np.mean(g * y, axis=-1, keepdims=True)
        return ((g - gm - y * gy) / sigma,)

    return _result(y, (a,), back)


# ----------------------------------------------------------------------------
# adapter primitives
# ----------------------------------------------------------------------------


def propulsion(v, z, k: int) -> Tensor:
    """Fused ``v * z**k`` with ``z`` applied to every row of ``v`` (any leading axes)."""
    if isinstance(k, bool) or not isinstance(k, (int, np.integer)) or k < 0:
        raise UnsupportedDegreeError(f"degree must be a non-negative integer, got {k!r}")
    v, z = as_tensor(v), as_tensor(z)
    if z.ndim != 1 or v.shape[-1] != z.shape[0]:
        raise DimensionError(f"propulsion: vector of shape {z.shape} does not fit output {v.shape}")
    shape = v.shape
    v2 = v.data.reshape(-1, shape[-1])
    zd = z.data.astype(v2.dtype, copy=False)
    out = kernels.propulsion_forward(v2, zd, k).reshape(shape)

    def back(g):
        gv, gz = kernels.propulsion_backward(g.reshape(-1, shape[-1]), v2, zd, k)
        return gv.reshape(shape), gz

    return _result(out, (v, z), back)


def pool(candidates: Sequence, mode: str) -> Tensor:
    """Elementwise pooling of equally shaped tensors: average, max, min or l2 (root mean square)."""
    ts = [as_tensor(c) for c in candidates]
    if not ts:
        raise DimensionError("pool: no candidates")
    if mode not in kernels.POOL_MODES:
        raise ValueError(f"unknown pooling mode {mode!r}")
    shape = ts[0].shape
    for t in ts[1:]:
        if t.shape != shape:
            raise DimensionError(f"pool: candidate shapes differ, {shape} and {t.shape}")
    code = kernels.POOL_MODES[mode]
    stack = np.stack([t.data.reshape(-1) for t in ts])
    out, idx = kernels.pool_forward(stack, code)

    def back(g):
        gs = kernels.pool_backward(g.reshape(-1), stack, out, idx, code)
        return tuple(row.reshape(shape) for row in gs)

    return _result(out.reshape(shape), ts, back)


def cross_entropy(logits, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(``logits``)."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    t = logits.shape[0]
    x = logits.data
    shifted = x - x.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(t)
    loss = np.mean(lse - shifted[rows, labels])

    def back(g):
        p = np.exp(shifted - lse[:, None])
        p[rows, labels] -= 1.0
        return (p * (g / t),)

    return _result(np.asarray(loss, dtype=x.dtype), (logits,), back)


# ----------------------------------------------------------------------------
# graph traversal
# ----------------------------------------------------------------------------


def topo_order(root: Tensor) -> list:
    """Differentiable nodes reachable from ``root``, parents before children."""
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, params: Iterable[Tensor] | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every differentiable leaf.

    ``params``, when given, also receive a zero gradient if the loss does not
    depend on them. The recorded graph is released afterwards.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads = {id(loss): np.ones_like(loss.data)}
    order = topo_order(loss)
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg
    for node in order:
        if not node.is_leaf:
            node._parents = ()
            node._backward = None
    if params is not None:
        for p in params:
            if p.requires_grad and p.grad is None:
                p.grad = np.zeros_like(p.data)


def finite_diff_grad(f: Callable, p: Tensor, h: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of the scalar ``f()`` with respect to ``p``.

    ``f`` is called with no arguments and must read ``p.data``. The probe runs
    in float64 whatever the parameter's own dtype.
    """
    original = p.data
    work = original.astype(np.float64, copy=True)
    grad = np.zeros_like(work)
    flat = work.reshape(-1)
    p.data = work
    try:
        for i in range(flat.size):
            x0 = flat[i]
            flat[i] = x0 + h
            fp = _scalar(f())
            flat[i] = x0 - h
            fm = _scalar(f())
            flat[i] = x0
            grad.reshape(-1)[i] = (fp - fm) / (2.0 * h)
    finally:
        p.data = original
    return grad


def _scalar(value) -> float:
    if isinstance(value, Tensor):
        return float(value.data.reshape(-1)[0]) if value.size == 1 else float("nan")
    return float(value)
