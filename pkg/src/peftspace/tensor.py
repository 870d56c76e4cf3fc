"""Dense tensors with reverse-mode automatic differentiation.

Every op builds its output eagerly with numpy and, when any input requires a
gradient, records a closure that pushes the upstream gradient back to its
inputs. ``Tensor.backward`` walks the recorded graph in reverse topological
order.

Two precision modes exist: single (the default, used for experiments) and
double (used by gradient checks and exactness tests)::

    with verification():
        x = Tensor(np.ones(3), requires_grad=True)
"""
from __future__ import annotations

import contextlib
import math

import numpy as np

from .errors import DimensionError, InputError, NonFiniteError

__all__ = [
    "Tensor", "precision", "verification", "no_grad", "default_dtype",
    "matmul", "add", "scale", "softmax", "layer_norm", "gelu",
    "embedding_lookup", "cross_entropy", "mse", "reshape", "transpose",
    "concat", "expand", "mean", "sum", "take_rows", "grad_check",
    "LAYER_NORM_EPS",
]

LAYER_NORM_EPS = 1e-5

_PRECISIONS = {"single": np.float32, "double": np.float64}
_state = {"dtype": np.float32, "grad": True}


def default_dtype():
    return _state["dtype"]


@contextlib.contextmanager
def precision(mode):
    """Temporarily switch the dtype used for newly created tensors."""
    if mode not in _PRECISIONS:
        raise ValueError(f"unknown precision mode {mode!r}; expected one of {sorted(_PRECISIONS)}")
    previous = _state["dtype"]
    _state["dtype"] = _PRECISIONS[mode]
    try:
        yield
    finally:
        _state["dtype"] = previous


def verification():
    return precision("double")


@contextlib.contextmanager
def no_grad():
    previous = _state["grad"]
    _state["grad"] = False
    try:
        yield
    finally:
        _state["grad"] = previous


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad=False, dtype=None):
        self.data = np.array(data, dtype=dtype or _state["dtype"])
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self.op = "leaf"

    @property
    def shape(self):
        return tuple(self.data.shape)

    @property
    def size(self):
        return int(self.data.size)

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def values(self):
        return self.data.ravel().tolist()

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = np.zeros_like(self.data) if self.requires_grad else None

    def check_finite(self):
        if not np.all(np.isfinite(self.data)):
            raise NonFiniteError(f"tensor produced by {self.op!r} contains NaN or Inf")
        return self

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __mul__(self, factor):
        return scale(self, factor)

    __rmul__ = __mul__

    @property
    def T(self):
        return transpose(self, None)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self):
        return sum(self)

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into ``.grad`` of every reachable tensor that requires it."""
        if not self.requires_grad:
            raise InputError("backward() called on a tensor that does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise InputError("backward() without an explicit gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order = _topological_order(self)
        _accumulate(self, np.asarray(grad, dtype=self.data.dtype))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def _topological_order(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def _accumulate(t, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype)
    else:
        t.grad += g


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents, backward, op):
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    tracked = tuple(p for p in parents if p.requires_grad) if _state["grad"] else ()
    out.requires_grad = bool(tracked)
    out._parents = tracked
    out._backward = backward if tracked else None
    return out


def matmul(a, b):
    """Matrix product over the last two axes.

    ``b`` is either a 2-D matrix shared across a's leading axes, or has the
    same leading axes as ``a``.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs operands of rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions disagree: {a.shape} x {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul batch dimensions disagree: {a.shape} x {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g @ np.swapaxes(bd, -1, -2))
        if b.requires_grad:
            if bd.ndim == 2 and ad.ndim > 2:
                _accumulate(b, ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1]))
            else:
                _accumulate(b, np.swapaxes(ad, -1, -2) @ g)

    return _result(ad @ bd, (a, b), backward, "matmul")


def add(a, b):
    """Elementwise sum of equal shapes, or a bias vector added over the last axis."""
    a, b = _as_tensor(a), _as_tensor(b)
    bias = b.ndim == 1 and a.ndim > 1
    if a.shape != b.shape and not (bias and b.shape[0] == a.shape[-1]):
        raise DimensionError(f"cannot add shapes {a.shape} and {b.shape}")

    def backward(g):
        _accumulate(a, g)
        if b.requires_grad:
            _accumulate(b, g.reshape(-1, g.shape[-1]).sum(axis=0) if bias else g)

    return _result(a.data + b.data, (a, b), backward, "add")


def scale(a, factor):
    a = _as_tensor(a)
    factor = float(factor)

    def backward(g):
        _accumulate(a, g * factor)

    return _result(a.data * a.data.dtype.type(factor), (a,), backward, "scale")


def softmax(x):
    x = _as_tensor(x)
    if x.ndim == 0 or x.shape[-1] == 0:
        raise InputError("softmax over an empty axis")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        _accumulate(x, y * (g - (g * y).sum(axis=-1, keepdims=True)))

    return _result(y, (x,), backward, "softmax")


def layer_norm(x, gamma, beta, eps=LAYER_NORM_EPS):
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    if x.shape[-1] == 0:
        raise InputError("layer_norm over an empty axis")
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise DimensionError(f"layer_norm affine shapes {gamma.shape}/{beta.shape} do not match {x.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    centred = x.data - mu
    inv_std = 1.0 / np.sqrt((centred * centred).mean(axis=-1, keepdims=True) + eps)
    xhat = centred * inv_std
    out = xhat * gamma.data + beta.data

    def backward(g):
        if beta.requires_grad:
            _accumulate(beta, g.reshape(-1, g.shape[-1]).sum(axis=0))
        if gamma.requires_grad:
            _accumulate(gamma, (g * xhat).reshape(-1, g.shape[-1]).sum(axis=0))
        if x.requires_grad:
            gx = g * gamma.data
            _accumulate(x, inv_std * (gx - gx.mean(axis=-1, keepdims=True)
                                      - xhat * (gx * xhat).mean(axis=-1, keepdims=True)))

    return _result(out, (x, gamma, beta), backward, "layer_norm")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x):
    """tanh approximation of GELU."""
    x = _as_tensor(x)
    d = x.data
    inner = _GELU_C * (d + 0.044715 * (d * d * d))
    t = np.tanh(inner)
    y = 0.5 * d * (1.0 + t)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * d * d)
        _accumulate(x, g * (0.5 * (1.0 + t) + 0.5 * d * (1.0 - t * t) * dinner))

    return _result(y.astype(d.dtype, copy=False), (x,), backward, "gelu")


def embedding_lookup(table, ids):
    table = _as_tensor(table)
    ids = np.asarray(ids)
    if table.ndim != 2:
        raise DimensionError(f"embedding table must be 2-D, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise InputError(f"token id out of range [0, {table.shape[0]})")

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.ravel(), g.reshape(-1, table.shape[1]))
        _accumulate(table, gt)

    return _result(table.data[ids], (table,), backward, "embedding")


def cross_entropy(logits, labels):
    """Mean negative log-likelihood of integer ``labels`` under row-wise softmax of ``logits``."""
    logits = _as_tensor(logits)
    labels = np.asarray(labels)
    if logits.ndim != 2 or logits.shape[1] == 0:
        raise InputError(f"cross_entropy expects non-empty (N, C) logits, got {logits.shape}")
    if labels.shape != (logits.shape[0],):
        raise DimensionError(f"labels shape {labels.shape} does not match {logits.shape[0]} rows")
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise InputError(f"label index out of range [0, {logits.shape[1]})")
    n = logits.shape[0]
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logz
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()

    def backward(g):
        p = np.exp(logp)
        p[rows, labels] -= 1.0
        _accumulate(logits, p * (g / n))

    return _result(np.asarray(loss, dtype=logits.data.dtype), (logits,), backward, "cross_entropy")


def mse(pred, target):
    pred = _as_tensor(pred)
    target = np.asarray(target, dtype=pred.data.dtype)
    if target.shape != pred.shape:
        raise DimensionError(f"mse target shape {target.shape} does not match {pred.shape}")
    if pred.size == 0:
        raise InputError("mse over an empty tensor")
    diff = pred.data - target

    def backward(g):
        _accumulate(pred, g * 2.0 * diff / diff.size)

    return _result(np.asarray((diff * diff).mean(), dtype=pred.data.dtype), (pred,), backward, "mse")


def reshape(x, shape):
    x = _as_tensor(x)
    src = x.shape

    def backward(g):
        _accumulate(x, g.reshape(src))

    return _result(x.data.reshape(shape), (x,), backward, "reshape")


def transpose(x, axes=None):
    x = _as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inverse = tuple(np.argsort(axes))

    def backward(g):
        _accumulate(x, g.transpose(inverse))

    return _result(x.data.transpose(axes), (x,), backward, "transpose")


def concat(tensors, axis=0):
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def backward(g):
        for t, piece in zip(tensors, np.split(g, bounds, axis=axis)):
            _accumulate(t, piece)

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward, "concat")


def expand(x, n):
    """Repeat ``x`` along a new leading axis of length ``n``."""
    x = _as_tensor(x)

    def backward(g):
        _accumulate(x, g.sum(axis=0))

    return _result(np.broadcast_to(x.data, (n,) + x.shape).copy(), (x,), backward, "expand")


def mean(x, axis):
    x = _as_tensor(x)
    n = x.shape[axis]
    if n == 0:
        raise InputError("mean over an empty axis")

    def backward(g):
        _accumulate(x, np.broadcast_to(np.expand_dims(g, axis) / n, x.shape))

    return _result(x.data.mean(axis=axis), (x,), backward, "mean")


def sum(x):  # noqa: A001 - mirrors numpy naming
    x = _as_tensor(x)

    def backward(g):
        _accumulate(x, np.broadcast_to(g, x.shape))

    return _result(np.asarray(x.data.sum(), dtype=x.data.dtype), (x,), backward, "sum")


def take_rows(x, index):
    """Select rows of a 2-D tensor; repeated indices accumulate in backward."""
    x = _as_tensor(x)
    index = np.asarray(index, dtype=np.int64)
    if x.ndim != 2:
        raise DimensionError(f"take_rows expects a 2-D tensor, got {x.shape}")

    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, index, g)
        _accumulate(x, gx)

    return _result(x.data[index], (x,), backward, "take_rows")


def grad_check(f, x, step=1e-5):
    """Largest relative disagreement between autodiff and central differences.

    ``f`` maps ``x`` to a scalar tensor and must rebuild its graph on every call.
    Perturbs ``x.data`` in place and restores it afterwards.
    """
    was = x.requires_grad
    x.requires_grad = True
    x.grad = None
    y = f(x)
    if not np.all(np.isfinite(y.data)):
        raise NonFiniteError("f(x) is not finite")
    y.backward()
    auto = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
    x.grad = None
    numeric = np.zeros_like(x.data, dtype=np.float64)
    flat = x.data.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = float(f(x).data)
            flat[i] = orig - step
            lo = float(f(x).data)
            flat[i] = orig
            numeric.reshape(-1)[i] = (hi - lo) / (2 * step)
    x.requires_grad = was
    a = auto.astype(np.float64).reshape(-1)
    c = numeric.reshape(-1)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(c)), 1e-8)
    return float(np.max(np.abs(a - c) / denom)) if a.size else 0.0
