"""Reverse-mode automatic differentiation over dense float64 numpy arrays.

Only the primitives the model needs are provided.  Every op records its
parents and a backward rule returning one gradient per parent; ``backward``
walks the graph in reverse topological order, visiting each node once.
"""

from __future__ import annotations

import contextlib
from pathlib import Path

import numpy as np

MASK_VALUE = -1e30

_grad_enabled = True
_check_finite = True


class ShapeError(ValueError):
    pass


class NumericalError(FloatingPointError):
    pass


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording the graph (sampling, evaluation)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Value:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None, op=""):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self.op = op

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        return f"Value(shape={self.data.shape}, op={self.op!r})"

    def zero_grad(self):
        self.grad = None

    def numpy(self):
        return self.data

    def backward(self):
        backward(self)

    # operator sugar
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

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    @property
    def T(self):
        return swap_last(self)

    def sum(self, axis=None, keepdims=False):
        return vsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_value(x):
    return x if isinstance(x, Value) else Value(x)


def _make(data, parents, backward_fn, op):
    if _check_finite and not np.all(np.isfinite(data)):
        raise NumericalError(f"non-finite output from op '{op}'")
    needs = _grad_enabled and any(p.requires_grad for p in parents)
    if not needs:
        return Value(data, op=op)
    return Value(data, requires_grad=True, _parents=parents, _backward=backward_fn, op=op)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    ndiff = g.ndim - len(shape)
    if ndiff > 0:
        g = g.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- elementwise


def add(a, b):
    a, b = as_value(a), as_value(b)
    _broadcast_shape("add", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b):
    a, b = as_value(a), as_value(b)
    _broadcast_shape("sub", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b):
    a, b = as_value(a), as_value(b)
    _broadcast_shape("mul", a, b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), bw, "mul")


def div(a, b):
    a, b = as_value(a), as_value(b)
    _broadcast_shape("div", a, b)
    out = a.data / b.data

    def bw(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * out / b.data, b.shape))

    return _make(out, (a, b), bw, "div")


def scale(a, c):
    """Multiply by a python scalar."""
    a = as_value(a)
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


def square(a):
    a = as_value(a)
    return _make(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,), "square")


def sqrt(a):
    a = as_value(a)
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (0.5 * g / out,), "sqrt")


def exp(a):
    a = as_value(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a):
    a = as_value(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sin(a):
    a = as_value(a)
    return _make(np.sin(a.data), (a,), lambda g: (g * np.cos(a.data),), "sin")


def cos(a):
    a = as_value(a)
    return _make(np.cos(a.data), (a,), lambda g: (-g * np.sin(a.data),), "cos")


def tanh(a):
    a = as_value(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a):
    """tanh approximation of GELU."""
    a = as_value(a)
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x**3)
    th = np.tanh(inner)
    out = 0.5 * x * (1.0 + th)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * dinner),)

    return _make(out, (a,), bw, "gelu")


def softplus(a):
    a = as_value(a)
    x = a.data
    out = np.logaddexp(0.0, x)

    def bw(g):
        # logistic sigmoid, written to avoid overflow
        return (g * np.exp(-np.logaddexp(0.0, -x)),)

    return _make(out, (a,), bw, "softplus")


def clip_min(a, floor):
    """max(a, floor); gradient flows only where a > floor."""
    a = as_value(a)
    keep = a.data > floor
    return _make(np.where(keep, a.data, floor), (a,), lambda g: (g * keep,), "clip_min")


# ------------------------------------------------------------------ structural


def matmul(a, b):
    a, b = as_value(a), as_value(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from None

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(out, (a, b), bw, "matmul")


def swap_last(a):
    a = as_value(a)
    return _make(np.swapaxes(a.data, -1, -2), (a,), lambda g: (np.swapaxes(g, -1, -2),), "swap_last")


def transpose(a, axes):
    a = as_value(a)
    inv = np.argsort(axes)
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def reshape(a, shape):
    a = as_value(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} to {shape}") from None
    return _make(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def broadcast_to(a, shape):
    a = as_value(a)
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError:
        raise ShapeError(f"broadcast: cannot broadcast {a.shape} to {tuple(shape)}") from None
    return _make(np.array(out), (a,), lambda g: (_unbroadcast(g, a.shape),), "broadcast")


def concat(values, axis=-1):
    values = [as_value(v) for v in values]
    ref = values[0].shape
    ax = axis % len(ref)
    for v in values[1:]:
        if v.ndim != len(ref) or any(v.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ShapeError(f"concat: incompatible shapes {[x.shape for x in values]} on axis {axis}")
    sizes = [v.shape[ax] for v in values]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        out = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx = [slice(None)] * g.ndim
            idx[ax] = slice(lo, hi)
            out.append(g[tuple(idx)])
        return tuple(out)

    return _make(np.concatenate([v.data for v in values], axis=ax), tuple(values), bw, "concat")


def getitem(a, idx):
    a = as_value(a)
    out = a.data[idx]

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return _make(np.array(out), (a,), bw, "slice")


def vsum(a, axis=None, keepdims=False):
    a = as_value(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    return _make(np.asarray(out), (a,), bw, "sum")


def mean(a, axis=None, keepdims=False):
    a = as_value(a)
    n = a.data.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return scale(vsum(a, axis, keepdims), 1.0 / n)


# ------------------------------------------------------------------- composite


def softmax(a, mask=None):
    """Softmax over the last axis; ``mask`` is additive (use MASK_VALUE)."""
    a = as_value(a)
    x = a.data if mask is None else a.data + mask
    x = x - x.max(axis=-1, keepdims=True)
    e = np.exp(x)
    out = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _make(out, (a,), bw, "softmax")


def layer_norm(a, gamma, beta, eps=1e-5):
    a, gamma, beta = as_value(a), as_value(gamma), as_value(beta)
    if gamma.shape != (a.shape[-1],) or beta.shape != (a.shape[-1],):
        raise ShapeError(f"layer_norm: input {a.shape}, gamma {gamma.shape}, beta {beta.shape}")
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def bw(g):
        gx = g * gamma.data
        n = x.shape[-1]
        da = inv / n * (n * gx - gx.sum(axis=-1, keepdims=True)
                        - xhat * (gx * xhat).sum(axis=-1, keepdims=True))
        return (da, _unbroadcast(g * xhat, gamma.shape), _unbroadcast(g, beta.shape))

    return _make(out, (a, gamma, beta), bw, "layer_norm")


def linear(x, w, b=None):
    y = matmul(x, w)
    return y if b is None else add(y, b)


# -------------------------------------------------------------------- backward


def _topo(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss):
    """Accumulate d(loss)/d(node) into ``.grad`` of every leaf requiring grad."""
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _topo(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for p, gp in zip(node._parents, node._backward(g)):
            if gp is None or not p.requires_grad:
                continue
            key = id(p)
            grads[key] = gp if key not in grads else grads[key] + gp


# ------------------------------------------------------------- parameters/Adam


class ParamStore:
    """Named trainable tensors plus Adam state.

    Names are dotted paths (``encoder.layer0.wq``); ``group(prefix)`` gives a
    view used by each model component.
    """

    def __init__(self):
        self.params = {}
        self.m = {}
        self.v = {}
        self.step = 0

    def add(self, name, array):
        if name in self.params:
            raise KeyError(f"duplicate parameter {name!r}")
        p = Value(np.array(array, dtype=np.float64), requires_grad=True, op=name)
        self.params[name] = p
        return p

    def __getitem__(self, name):
        return self.params[name]

    def __contains__(self, name):
        return name in self.params

    def __iter__(self):
        return iter(self.params)

    def __len__(self):
        return len(self.params)

    def items(self):
        return self.params.items()

    def names(self, prefix=""):
        return [n for n in self.params if n.startswith(prefix)]

    def group(self, prefix):
        return _Group(self, prefix)

    def n_weights(self):
        return sum(p.data.size for p in self.params.values())

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def copy(self):
        out = ParamStore()
        for name, p in self.params.items():
            out.add(name, p.data.copy())
        return out

    def state(self):
        return {name: p.data.copy() for name, p in self.params.items()}

    def save(self, path):
        lines = ["# restflow params v1"]
        for name, p in self.params.items():
            shape = " ".join(str(s) for s in p.shape) or "scalar"
            lines.append(f"param {name} {shape}")
            lines.append(" ".join(repr(float(x)) for x in p.data.ravel()))
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path):
        store = cls()
        lines = [ln for ln in Path(path).read_text().splitlines() if ln and not ln.startswith("#")]
        if len(lines) % 2:
            raise ValueError(f"{path}: truncated parameter file")
        for head, body in zip(lines[::2], lines[1::2]):
            parts = head.split()
            if parts[0] != "param" or len(parts) < 3:
                raise ValueError(f"{path}: bad manifest line {head!r}")
            shape = () if parts[2] == "scalar" else tuple(int(s) for s in parts[2:])
            data = np.array([float(x) for x in body.split()], dtype=np.float64)
            if data.size != int(np.prod(shape)):
                raise ValueError(f"{path}: {parts[1]} expects {shape}, got {data.size} values")
            store.add(parts[1], data.reshape(shape))
        return store


class _Group:
    def __init__(self, store, prefix):
        self.store = store
        self.prefix = prefix.rstrip(".") + "."

    def __getitem__(self, name):
        return self.store[self.prefix + name]

    def __contains__(self, name):
        return self.prefix + name in self.store

    def add(self, name, array):
        return self.store.add(self.prefix + name, array)

    def group(self, prefix):
        return _Group(self.store, self.prefix + prefix)


def adam_step(store, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
    """One Adam update with decoupled weight decay, then zero the grads."""
    store.step += 1
    t = store.step
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    for name, p in store.params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise ShapeError(f"adam: grad shape {g.shape} != param shape {p.shape} for {name}")
        m = store.m.get(name)
        v = store.v.get(name)
        m = (1 - beta1) * g if m is None else beta1 * m + (1 - beta1) * g
        v = (1 - beta2) * g * g if v is None else beta2 * v + (1 - beta2) * g * g
        store.m[name], store.v[name] = m, v
        data = p.data
        if weight_decay:
            data = data - lr * weight_decay * data
        p.data = data - lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
        p.grad = None
