"""Reverse-mode automatic differentiation over dense float64 tensors.

A Tensor wraps a numpy array and remembers how it was produced. Ops build
an implicit graph; backward() traces the graph into a Tape (op records in
topological order) and sweeps it exactly once in reverse, accumulating
gradients into every requires_grad leaf it can reach.

A graph is single-threaded. Independent graphs may live on separate
threads; the grad-mode switch is thread-local.
"""

import json
import threading
from contextlib import contextmanager

import numpy as np

from .errors import DataError, NumericalError

PARAMS_FORMAT = "riskport.params/1"

_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation mode)."""
    prev = grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Tensor:
    """Dense float64 tensor with optional gradient tracking.

    Every op result is checked for NaN/Inf and rejected with
    NumericalError, so a graph can never silently carry non-finite
    values.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp", "_backward_done")

    # Keep numpy from absorbing `ndarray <op> Tensor` into an object array;
    # with ufunc dispatch declined, Python falls back to the reflected
    # operators below.
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NumericalError("tensor holds NaN or Inf")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._vjp = None
        self._backward_done = False

    # -- introspection -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError("item() needs a single-element tensor")
        return float(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    # -- operator sugar ------------------------------------------------

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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    # -- reductions and elementwise methods ------------------------------

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None):
        n = self.data.size if axis is None else self.data.shape[axis]
        return tensor_sum(self, axis=axis) / float(n)

    def std(self):
        """Sample standard deviation (n-1 divisor), eps-guarded under the root."""
        n = self.data.size
        if n < 2:
            raise ValueError("std needs at least two elements")
        centered = self - self.mean()
        var = (centered * centered).sum() / float(n - 1)
        return sqrt(var + 1e-12)

    def abs(self):
        return tensor_abs(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)

    def relu(self):
        return relu(self)

    def sigmoid(self):
        return sigmoid(self)

    def tanh(self):
        return tanh(self)

    def reshape(self, shape):
        return reshape(self, shape)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, vjp) -> Tensor:
    out = Tensor(data)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise binary ops ----------------------------------------------


def add(a, b):
    a, b = _wrap(a), _wrap(b)

    def vjp(g):
        return (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape))

    return _make(a.data + b.data, (a, b), vjp)


def sub(a, b):
    a, b = _wrap(a), _wrap(b)

    def vjp(g):
        return (_unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape))

    return _make(a.data - b.data, (a, b), vjp)


def mul(a, b):
    a, b = _wrap(a), _wrap(b)

    def vjp(g):
        return (_unbroadcast(g * b.data, a.data.shape), _unbroadcast(g * a.data, b.data.shape))

    return _make(a.data * b.data, (a, b), vjp)


def div(a, b):
    a, b = _wrap(a), _wrap(b)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data

    def vjp(g):
        ga = g / b.data
        gb = -g * a.data / (b.data * b.data)
        return (_unbroadcast(ga, a.data.shape), _unbroadcast(gb, b.data.shape))

    return _make(out, (a, b), vjp)


def neg(a):
    a = _wrap(a)

    def vjp(g):
        return (-g,)

    return _make(-a.data, (a,), vjp)


def matmul(a, b):
    """Matrix product. Supports 2d@2d, 2d@1d, 1d@2d, 1d@1d and batched 3d@3d."""
    a, b = _wrap(a), _wrap(b)
    A, B = a.data, b.data
    if A.ndim == 0 or B.ndim == 0:
        raise ValueError("matmul needs at least 1-D operands")
    try:
        out = A @ B
    except ValueError as exc:
        raise ValueError(f"matmul shape mismatch: {A.shape} @ {B.shape}") from exc

    if A.ndim <= 2 and B.ndim <= 2:

        def vjp(g):
            if A.ndim == 2 and B.ndim == 2:
                return (g @ B.T, A.T @ g)
            if A.ndim == 2 and B.ndim == 1:
                return (np.outer(g, B), A.T @ g)
            if A.ndim == 1 and B.ndim == 2:
                return (B @ g, np.outer(A, g))
            return (g * B, g * A)

        return _make(out, (a, b), vjp)

    if A.ndim == 3 and B.ndim == 3:

        def vjp(g):
            return (g @ np.swapaxes(B, 1, 2), np.swapaxes(A, 1, 2) @ g)

        return _make(out, (a, b), vjp)

    raise ValueError(f"unsupported matmul ranks: {A.ndim} @ {B.ndim}")


# -- reductions -----------------------------------------------------------


def tensor_sum(t, axis=None, keepdims=False):
    t = _wrap(t)
    out = t.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, t.data.shape).copy(),)
        ge = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(ge, t.data.shape).copy(),)

    return _make(out, (t,), vjp)


def norm2(t, axis=None):
    """Euclidean norm, with subgradient 0 at the origin (like abs)."""
    t = _wrap(t)
    x = t.data
    if axis is None:
        y = np.sqrt(np.sum(x * x))

        def vjp(g):
            denom = y if y > 0.0 else 1.0
            return (g * x / denom,)

        return _make(y, (t,), vjp)

    y = np.sqrt(np.sum(x * x, axis=axis))

    def vjp(g):
        yk = np.expand_dims(y, axis)
        gk = np.expand_dims(g, axis)
        safe = np.where(yk > 0.0, yk, 1.0)
        return (gk * x / safe,)

    return _make(y, (t,), vjp)


# -- elementwise unary ops -------------------------------------------------


def relu(t):
    t = _wrap(t)

    def vjp(g):
        return (g * (t.data > 0.0),)

    return _make(np.maximum(t.data, 0.0), (t,), vjp)


def tensor_abs(t):
    t = _wrap(t)

    def vjp(g):
        return (g * np.sign(t.data),)

    return _make(np.abs(t.data), (t,), vjp)


def exp(t):
    t = _wrap(t)
    with np.errstate(over="ignore"):
        out = np.exp(t.data)

    def vjp(g):
        return (g * out,)

    return _make(out, (t,), vjp)


def log(t):
    t = _wrap(t)
    if np.any(t.data <= 0.0):
        raise NumericalError("log of non-positive value")

    def vjp(g):
        return (g / t.data,)

    return _make(np.log(t.data), (t,), vjp)


def sqrt(t):
    t = _wrap(t)
    if np.any(t.data <= 0.0):
        raise NumericalError("sqrt of non-positive value")
    out = np.sqrt(t.data)

    def vjp(g):
        return (g / (2.0 * out),)

    return _make(out, (t,), vjp)


def _sigmoid_stable(x: np.ndarray) -> np.ndarray:
    s = np.exp(-np.abs(x))
    return np.where(x >= 0.0, 1.0 / (1.0 + s), s / (1.0 + s))


def sigmoid(t):
    t = _wrap(t)
    out = _sigmoid_stable(t.data)

    def vjp(g):
        return (g * out * (1.0 - out),)

    return _make(out, (t,), vjp)


def tanh(t):
    t = _wrap(t)
    out = np.tanh(t.data)

    def vjp(g):
        return (g * (1.0 - out * out),)

    return _make(out, (t,), vjp)


def softplus(t):
    t = _wrap(t)
    out = np.logaddexp(0.0, t.data)

    def vjp(g):
        return (g * _sigmoid_stable(t.data),)

    return _make(out, (t,), vjp)


def softmax(t, axis=-1):
    t = _wrap(t)
    z = t.data - t.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        inner = (g * y).sum(axis=axis, keepdims=True)
        return ((g - inner) * y,)

    return _make(y, (t,), vjp)


# -- shape ops -------------------------------------------------------------


def getitem(t, idx):
    t = _wrap(t)
    out = t.data[idx]

    def vjp(g):
        full = np.zeros_like(t.data)
        full[idx] += g
        return (full,)

    return _make(out, (t,), vjp)


def concat(tensors, axis=0):
    tensors = [_wrap(t) for t in tensors]
    if not tensors:
        raise ValueError("concat of empty list")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = np.cumsum([t.data.shape[axis] for t in tensors])[:-1]

    def vjp(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _make(out, tuple(tensors), vjp)


def reshape(t, shape):
    t = _wrap(t)
    orig = t.data.shape

    def vjp(g):
        return (g.reshape(orig),)

    return _make(t.data.reshape(shape), (t,), vjp)


# -- backward pass ----------------------------------------------------------


class Tape:
    """Op records reachable from one output, in topological order.

    The reverse sweep visits each record exactly once.
    """

    def __init__(self, nodes, root):
        self._nodes = nodes
        self._root = root

    @classmethod
    def trace(cls, root: Tensor) -> "Tape":
        nodes = []
        visited = set()
        stack = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                nodes.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in visited:
                    stack.append((p, False))
        return cls(nodes, root)

    def backward(self, seed: np.ndarray) -> dict:
        flows = {id(self._root): np.asarray(seed, dtype=np.float64)}
        leaf_grads = {}
        for node in reversed(self._nodes):
            g = flows.pop(id(node), None)
            if g is None:
                continue
            if node._vjp is None:
                if node in leaf_grads:
                    leaf_grads[node] = leaf_grads[node] + g
                else:
                    leaf_grads[node] = g
                continue
            for parent, pg in zip(node._parents, node._vjp(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in flows:
                    flows[key] = flows[key] + pg
                else:
                    flows[key] = pg
        return leaf_grads


def backward(loss: Tensor, params=None) -> dict:
    """Accumulate d(loss)/d(leaf) into .grad for every reachable leaf.

    Returns {leaf: gradient}. When `params` is given, parameters without a
    path to the loss appear in the map with zero gradients. Calling
    backward twice on the same tensor raises; rebuild the graph instead.
    """
    if not isinstance(loss, Tensor):
        raise ValueError("backward expects a Tensor")
    if loss.data.shape != ():
        raise ValueError("backward needs a scalar loss")
    if loss._backward_done:
        raise ValueError("backward already ran for this tensor; rebuild the graph")
    loss._backward_done = True

    grads: dict = {}
    if loss.requires_grad:
        grads = Tape.trace(loss).backward(np.float64(1.0))

    for t, g in grads.items():
        g = np.asarray(g, dtype=np.float64).reshape(t.data.shape)
        grads[t] = g
        t.grad = g if t.grad is None else t.grad + g

    if params is not None:
        for p in params:
            if p.requires_grad and p not in grads:
                grads[p] = np.zeros_like(p.data)
    return grads


# -- optimizer ---------------------------------------------------------------


class AdamW:
    """Adam with decoupled weight decay and bias correction."""

    def __init__(self, params, lr, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01):
        if lr <= 0.0:
            raise ValueError("learning rate must be positive")
        b1, b2 = betas
        if not (0.0 <= b1 < 1.0 and 0.0 <= b2 < 1.0):
            raise ValueError("betas must lie in [0, 1)")
        self.params = list(params)
        self.lr = float(lr)
        self.betas = (float(b1), float(b2))
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]
        self._t = 0

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        self._t += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1 ** self._t
        c2 = 1.0 - b2 ** self._t
        for p, m, v in zip(self.params, self._m, self._v):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.weight_decay != 0.0:
                update = update + self.weight_decay * p.data
            p.data = p.data - self.lr * update
            if not np.all(np.isfinite(p.data)):
                raise NumericalError("parameter update produced NaN or Inf")


# -- checkpoint serialization -------------------------------------------------


def save_params(named_params, path):
    """Write (name, tensor) pairs (or a name -> tensor mapping) as a
    versioned JSON checkpoint."""
    if isinstance(named_params, dict):
        named_params = named_params.items()
    records = []
    for name, t in named_params:
        arr = t.data if isinstance(t, Tensor) else np.asarray(t, dtype=np.float64)
        records.append({
            "name": name,
            "shape": list(arr.shape),
            "values": arr.ravel().tolist(),
        })
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({"format": PARAMS_FORMAT, "params": records}, fh)


def load_params(path) -> dict:
    """Read a checkpoint back into {name: ndarray}."""
    with open(path, "r", encoding="utf-8") as fh:
        blob = json.load(fh)
    if blob.get("format") != PARAMS_FORMAT:
        raise DataError(f"unrecognized checkpoint format: {blob.get('format')!r}")
    out = {}
    for rec in blob["params"]:
        arr = np.asarray(rec["values"], dtype=np.float64).reshape(rec["shape"])
        out[rec["name"]] = arr
    return out
