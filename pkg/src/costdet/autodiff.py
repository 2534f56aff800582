"""Minimal reverse-mode autodiff over dense float64 arrays.

Provides exactly the operations the detector heads and the training losses
need: dense matmul, elementwise activations, weighted binary cross entropy,
smooth L1, max/sum/mean reductions and row gathering. Graphs are built
eagerly; ``backward`` walks the graph once in reverse topological order.
"""

from __future__ import annotations

import numpy as np

# Probability clamp applied inside weighted_bce before taking logs.
PROB_EPS = 1e-7


class GraphError(ValueError):
    """Raised on contract violations (shape mismatch, non-scalar loss)."""


class Value:
    """A node in the computation graph: float64 data plus same-shape grad.

    Leaf values are created directly; interior nodes are created by the
    operations below, which attach the parent references and a backward
    closure. The graph is acyclic by construction.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = np.zeros_like(self.data)
        self._parents = _parents
        self._backward = _backward
        if _parents:
            self.requires_grad = any(p.requires_grad for p in _parents)
        else:
            self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.data.shape

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Value(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- graph traversal ----------------------------------------------------

    def _toposort(self):
        order, visited, stack = [], set(), [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        return order

    def backward(self):
        """Accumulate d(self)/d(node) into .grad for every node in the graph.

        self must be scalar. Grads of all reachable nodes are reset first, so
        repeated backward calls do not compound within one graph.
        """
        if self.data.size != 1:
            raise GraphError(f"backward requires a scalar loss, got shape {self.data.shape}")
        order = self._toposort()
        for node in order:
            node.grad = np.zeros_like(node.data)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.requires_grad:
                node._backward()

    # -- operator sugar -----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(as_value(other), self)

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, -as_value(other))

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)


def as_value(x):
    return x if isinstance(x, Value) else Value(x)


def _unbroadcast(grad, shape):
    """Sum grad down to shape, undoing numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad.reshape(shape)


# -- arithmetic --------------------------------------------------------------


def add(a, b):
    a, b = as_value(a), as_value(b)
    out = Value(a.data + b.data, _parents=(a, b))

    def _bw():
        a.grad += _unbroadcast(out.grad, a.data.shape)
        b.grad += _unbroadcast(out.grad, b.data.shape)

    out._backward = _bw
    return out


def mul(a, b):
    a, b = as_value(a), as_value(b)
    out = Value(a.data * b.data, _parents=(a, b))

    def _bw():
        a.grad += _unbroadcast(out.grad * b.data, a.data.shape)
        b.grad += _unbroadcast(out.grad * a.data, b.data.shape)

    out._backward = _bw
    return out


def matmul(a, b):
    """Matrix product a[m,k] @ b[k,n]."""
    a, b = as_value(a), as_value(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise GraphError(f"matmul shape mismatch: {a.data.shape} @ {b.data.shape}")
    out = Value(a.data @ b.data, _parents=(a, b))

    def _bw():
        a.grad += out.grad @ b.data.T
        b.grad += a.data.T @ out.grad

    out._backward = _bw
    return out


# -- activations -------------------------------------------------------------


def sigmoid(x):
    """Elementwise 1/(1+exp(-x)), numerically saturating at both tails."""
    x = as_value(x)
    d = x.data
    s = np.empty_like(d)
    pos = d >= 0
    s[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    e = np.exp(d[~pos])
    s[~pos] = e / (1.0 + e)
    out = Value(s, _parents=(x,))

    def _bw():
        x.grad += out.grad * s * (1.0 - s)

    out._backward = _bw
    return out


def tanh(x):
    x = as_value(x)
    t = np.tanh(x.data)
    out = Value(t, _parents=(x,))

    def _bw():
        x.grad += out.grad * (1.0 - t * t)

    out._backward = _bw
    return out


# -- losses ------------------------------------------------------------------


def weighted_bce(p, target, w_pos=1.0, w_neg=1.0):
    """-w_pos*t*log(p) - w_neg*(1-t)*log(1-p), elementwise.

    p is clamped to [PROB_EPS, 1-PROB_EPS] before the logs, so the result is
    finite for p in {0, 1} exactly; the gradient is zero where the clamp is
    active. Scalar p with scalar target gives the per-proposal loss; array p
    with a broadcastable target gives the elementwise loss array.
    """
    p = as_value(p)
    t = np.asarray(target, dtype=np.float64)
    clamped = np.clip(p.data, PROB_EPS, 1.0 - PROB_EPS)
    loss = -w_pos * t * np.log(clamped) - w_neg * (1.0 - t) * np.log1p(-clamped)
    out = Value(loss, _parents=(p,))

    def _bw():
        inside = (p.data >= PROB_EPS) & (p.data <= 1.0 - PROB_EPS)
        dp = (-w_pos * t / clamped + w_neg * (1.0 - t) / (1.0 - clamped)) * inside
        p.grad += _unbroadcast(out.grad * dp, p.data.shape)

    out._backward = _bw
    return out


def smooth_l1(pred, target):
    """Sum over elements of 0.5*x^2 if |x|<1 else |x|-0.5, x = pred-target."""
    pred = as_value(pred)
    t = np.asarray(target, dtype=np.float64)
    if pred.data.shape != t.shape:
        raise GraphError(f"smooth_l1 shape mismatch: {pred.data.shape} vs {t.shape}")
    x = pred.data - t
    ax = np.abs(x)
    out = Value(np.sum(np.where(ax < 1.0, 0.5 * x * x, ax - 0.5)), _parents=(pred,))

    def _bw():
        pred.grad += out.grad * np.clip(x, -1.0, 1.0)

    out._backward = _bw
    return out


# -- reductions & indexing ---------------------------------------------------


def max_reduce(x):
    """Max over all elements; the gradient goes to the first argmax only."""
    x = as_value(x)
    if x.data.size == 0:
        raise GraphError("max_reduce over empty input")
    flat = x.data.reshape(-1)
    idx = int(np.argmax(flat))
    out = Value(flat[idx], _parents=(x,))

    def _bw():
        g = np.zeros_like(flat)
        g[idx] = out.grad
        x.grad += g.reshape(x.data.shape)

    out._backward = _bw
    return out


def sum_reduce(x):
    x = as_value(x)
    out = Value(np.sum(x.data), _parents=(x,))

    def _bw():
        x.grad += out.grad

    out._backward = _bw
    return out


def mean_reduce(x):
    x = as_value(x)
    if x.data.size == 0:
        raise GraphError("mean over empty input")
    n = x.data.size
    out = Value(np.sum(x.data) / n, _parents=(x,))

    def _bw():
        x.grad += out.grad / n

    out._backward = _bw
    return out


def gather_rows(x, indices):
    """Select rows of a 2-D value; backward scatter-adds into the source."""
    x = as_value(x)
    idx = np.asarray(indices, dtype=np.intp)
    out = Value(x.data[idx], _parents=(x,))

    def _bw():
        np.add.at(x.grad, idx, out.grad)

    out._backward = _bw
    return out


def reshape(x, shape):
    x = as_value(x)
    out = Value(x.data.reshape(shape), _parents=(x,))

    def _bw():
        x.grad += out.grad.reshape(x.data.shape)

    out._backward = _bw
    return out


# -- parameters --------------------------------------------------------------


class ParamStore:
    """Named map of trainable parameters with seeded, reproducible init.

    Creation order is recorded so serialization and updates are stable. All
    randomness comes from the store's own Generator, seeded once.
    """

    def __init__(self, rng_seed):
        self.rng_seed = int(rng_seed)
        self._rng = np.random.default_rng(self.rng_seed)
        self._params = {}
        self.order = []

    def add_normal(self, name, shape, scale):
        if name in self._params:
            raise KeyError(f"duplicate parameter {name!r}")
        v = Value(self._rng.normal(0.0, scale, size=shape), requires_grad=True)
        self._params[name] = v
        self.order.append(name)
        return v

    def add_zeros(self, name, shape):
        if name in self._params:
            raise KeyError(f"duplicate parameter {name!r}")
        v = Value(np.zeros(shape), requires_grad=True)
        self._params[name] = v
        self.order.append(name)
        return v

    def __getitem__(self, name) -> Value:
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def names(self):
        return list(self.order)

    def zero_grad(self):
        for name in self.order:
            p = self._params[name]
            p.grad = np.zeros_like(p.data)

    def sgd_step(self, lr):
        for name in self.order:
            p = self._params[name]
            p.data = p.data - lr * p.grad

    def flat_data(self):
        """All parameters concatenated in creation order (little-endian f64)."""
        return np.concatenate([self._params[n].data.reshape(-1) for n in self.order])

    def load_flat_data(self, flat):
        flat = np.asarray(flat, dtype=np.float64)
        pos = 0
        for name in self.order:
            p = self._params[name]
            n = p.data.size
            p.data = flat[pos : pos + n].reshape(p.data.shape).copy()
            pos += n
        if pos != flat.size:
            raise GraphError(f"parameter blob size mismatch: expected {pos}, got {flat.size}")


def backward(loss, store):
    """Run backprop from a scalar loss and return {name: gradient array}.

    Parameters not reachable from the loss keep an all-zero gradient.
    """
    if not isinstance(loss, Value):
        raise GraphError("loss must be a Value")
    store.zero_grad()
    loss.backward()
    return {name: store[name].grad.copy() for name in store.order}
