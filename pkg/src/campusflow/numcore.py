"""Minimal dense numeric core.

A :class:`Tensor` wraps a 2-D float64 array and, when produced by one of the
ops below, remembers how to push gradients to its inputs.  :func:`backward`
runs reverse-mode accumulation over that record.  Only the ops the flow models
need are provided; this is not a general autodiff system.
"""

import json
import math

import numpy as np


class Tensor:
    __slots__ = ("value", "grad", "parents", "grad_fn", "requires_grad", "name")

    def __init__(self, value, parents=(), grad_fn=None, requires_grad=False, name=None):
        value = np.asarray(value, dtype=np.float64)
        if value.ndim != 2:
            raise ValueError(f"expected a 2-D array, got shape {value.shape}")
        self.value = value
        self.grad = None
        self.parents = parents
        self.grad_fn = grad_fn
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"<Tensor{label} shape={self.shape}>"


class Param(Tensor):
    """A trainable leaf.  ``grad`` always exists and has the value's shape."""

    __slots__ = ()

    def __init__(self, value, name):
        super().__init__(np.array(value, dtype=np.float64), requires_grad=True, name=name)
        self.grad = np.zeros_like(self.value)

    def zero_grad(self):
        self.grad = np.zeros_like(self.value)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(value, parents, grad_fn):
    parents = tuple(parents)
    if not any(p.requires_grad for p in parents):
        return Tensor(value)
    return Tensor(value, parents=parents, grad_fn=grad_fn)


# ---------------------------------------------------------------------------
# ops


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    av, bv = a.value, b.value

    def grad_fn(g):
        return g @ bv.T, av.T @ g

    return _node(av @ bv, (a, b), grad_fn)


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"add shape mismatch: {a.shape} + {b.shape}")
    return _node(a.value + b.value, (a, b), lambda g: (g, g))


def add_bias(x, bias):
    """``x + bias`` with a ``1 x H`` bias broadcast over rows."""
    x, bias = as_tensor(x), as_tensor(bias)
    if bias.shape != (1, x.shape[1]):
        raise ValueError(f"bias shape {bias.shape} does not fit input {x.shape}")
    return _node(x.value + bias.value, (x, bias), lambda g: (g, g.sum(axis=0, keepdims=True)))


def relu(x):
    x = as_tensor(x)
    # subgradient at exactly zero is zero
    mask = x.value > 0.0
    return _node(np.where(mask, x.value, 0.0), (x,), lambda g: (np.where(mask, g, 0.0),))


def concat_cols(parts):
    parts = [as_tensor(p) for p in parts]
    n = parts[0].shape[0]
    for p in parts:
        if p.shape[0] != n:
            raise ValueError("concat_cols: row counts differ")
    bounds = np.cumsum([0] + [p.shape[1] for p in parts])

    def grad_fn(g):
        return tuple(g[:, bounds[i] : bounds[i + 1]] for i in range(len(parts)))

    return _node(np.concatenate([p.value for p in parts], axis=1), parts, grad_fn)


def embed(table, index):
    """Row lookup ``table[index]``; the gradient scatters back with summation."""
    table = as_tensor(table)
    index = np.asarray(index, dtype=np.int64)
    n_rows = table.shape[0]
    if index.size and (index.min() < 0 or index.max() >= n_rows):
        raise IndexError(f"embedding index out of range for table with {n_rows} rows")

    def grad_fn(g):
        out = np.empty((n_rows, g.shape[1]))
        for c in range(g.shape[1]):
            out[:, c] = np.bincount(index, weights=g[:, c], minlength=n_rows)
        return (out,)

    return _node(table.value[index], (table,), grad_fn)


def propagate(op, x, n_graphs):
    """Apply a ``V x V`` :class:`~campusflow.kernels.Propagator` to each of
    ``n_graphs`` stacked graphs held node-major in ``x``."""
    x = as_tensor(x)
    n, width = x.shape
    if n != op.n * n_graphs:
        raise ValueError(f"propagate: {n} rows is not {op.n} nodes x {n_graphs} graphs")
    wide = (op.n, n_graphs * width)
    out = op.apply(x.value.reshape(wide)).reshape(n, width)
    return _node(out, (x,), lambda g: (op.apply_t(g.reshape(wide)).reshape(n, width),))


def mse(pred, target):
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise ValueError(f"mse shape mismatch: {pred.shape} vs {target.shape}")
    diff = pred.value - target.value
    count = diff.size
    loss = float(np.dot(diff.ravel(), diff.ravel()) / count)
    if not math.isfinite(loss):
        raise FloatingPointError("non-finite loss")

    def grad_fn(g):
        d = (2.0 / count) * diff * g[0, 0]
        return d, -d

    return _node(np.array([[loss]]), (pred, target), grad_fn)


def backward(loss, scale=1.0):
    """Accumulate ``scale * d(loss)/d(param)`` into every reachable :class:`Param`."""
    if loss.shape != (1, 1):
        raise ValueError("backward needs a scalar (1 x 1) tensor")
    order, seen = [], set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads = {id(loss): np.full((1, 1), float(scale))}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if isinstance(node, Param):
            node.grad = node.grad + g
            continue
        if node.grad_fn is None:
            continue
        for parent, pg in zip(node.parents, node.grad_fn(g)):
            if not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


# ---------------------------------------------------------------------------
# optimizer


class Adam:
    """Adam with bias correction.  ``step_count`` advances once per :meth:`step`."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = {p.name: np.zeros_like(p.value) for p in self.params}
        self.v = {p.name: np.zeros_like(p.value) for p in self.params}

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self):
        for p in self.params:
            if not np.all(np.isfinite(p.grad)):
                raise FloatingPointError(f"non-finite gradient in parameter {p.name!r}")
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1**t
        c2 = 1.0 - self.beta2**t
        for p in self.params:
            g = p.grad
            m = self.m[p.name]
            v = self.v[p.name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.value -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# ---------------------------------------------------------------------------
# scaling


class NotFittedError(RuntimeError):
    pass


class MinMaxScaler:
    """Per-column affine map of ``[min, max]`` onto ``[lo, hi]``.

    Constant columns map to the midpoint of the target range.
    """

    def __init__(self, lo=-1.0, hi=1.0):
        if not hi > lo:
            raise ValueError("scaler range needs hi > lo")
        self.lo = float(lo)
        self.hi = float(hi)
        self.min_ = None
        self.max_ = None

    @property
    def fitted(self):
        return self.min_ is not None

    def fit(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 1:
            x = x[:, None]
        if x.shape[0] == 0:
            raise ValueError("cannot fit a scaler on zero rows")
        self.min_ = x.min(axis=0)
        self.max_ = x.max(axis=0)
        return self

    def _check(self, x):
        if not self.fitted:
            raise NotFittedError("scaler used before fit")
        x = np.asarray(x, dtype=np.float64)
        squeeze = x.ndim == 1
        if squeeze:
            x = x[:, None]
        if x.shape[1] != self.min_.shape[0]:
            raise ValueError(f"scaler fitted on {self.min_.shape[0]} columns, got {x.shape[1]}")
        return x, squeeze

    def transform(self, x):
        x, squeeze = self._check(x)
        span = self.max_ - self.min_
        const = span == 0
        safe = np.where(const, 1.0, span)
        out = self.lo + (x - self.min_) / safe * (self.hi - self.lo)
        out[:, const] = 0.5 * (self.lo + self.hi)
        return out[:, 0] if squeeze else out

    def inverse_transform(self, x):
        x, squeeze = self._check(x)
        span = self.max_ - self.min_
        out = self.min_ + (x - self.lo) / (self.hi - self.lo) * span
        return out[:, 0] if squeeze else out

    def fit_transform(self, x):
        return self.fit(x).transform(x)

    def to_dict(self):
        if not self.fitted:
            raise NotFittedError("scaler used before fit")
        return {"lo": self.lo, "hi": self.hi, "min": self.min_.tolist(), "max": self.max_.tolist()}

    @classmethod
    def from_dict(cls, d):
        s = cls(d["lo"], d["hi"])
        s.min_ = np.asarray(d["min"], dtype=np.float64)
        s.max_ = np.asarray(d["max"], dtype=np.float64)
        return s


# ---------------------------------------------------------------------------
# checkpoints


def checkpoint_dict(params, scalers=None, config=None):
    out = {
        "params": {
            name: {"shape": list(np.shape(v)), "values": np.asarray(v, dtype=np.float64).ravel().tolist()}
            for name, v in params.items()
        },
        "scalers": {name: s.to_dict() for name, s in (scalers or {}).items()},
        "config": config or {},
    }
    return out


def save_checkpoint(path, params, scalers=None, config=None):
    """Write parameters (row-major), scaler bounds and config as JSON."""
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(checkpoint_dict(params, scalers, config), fh, sort_keys=True, indent=1)
        fh.write("\n")


def load_checkpoint(path):
    with open(path, encoding="utf-8") as fh:
        raw = json.load(fh)
    params = {
        name: np.asarray(p["values"], dtype=np.float64).reshape(p["shape"]) for name, p in raw["params"].items()
    }
    scalers = {name: MinMaxScaler.from_dict(d) for name, d in raw["scalers"].items()}
    return params, scalers, raw["config"]


# ---------------------------------------------------------------------------
# gradient checking


def numerical_grad(loss_fn, param, h=1e-5):
    """Central differences of ``loss_fn()`` with respect to every entry of ``param``."""
    out = np.zeros_like(param.value)
    flat = param.value.reshape(-1)
    grad_flat = out.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = loss_fn()
        flat[i] = orig - h
        down = loss_fn()
        flat[i] = orig
        grad_flat[i] = (up - down) / (2.0 * h)
    return out


def relative_error(analytic, numeric):
    """Elementwise ``|a - n| / max(|a|, |n|)``, zero where both vanish."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.abs(a), np.abs(n))
    return np.where(denom > 0, np.abs(a - n) / np.where(denom > 0, denom, 1.0), 0.0)
