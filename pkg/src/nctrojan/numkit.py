"""Dense float32 tensors with tape-based reverse-mode autodiff and SGD.

Only what the small MLP/CNN classifiers need: matmul, fused linear, 3x3
conv, ReLU, 2x2 average pooling, reshape, a few elementwise ops and a
stabilized softmax cross-entropy. Broadcasting is limited to bias addition.
"""

import contextlib
import math
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import DimensionError, NonFiniteError, StateError

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op", "_consumed")

    def __init__(self, data, requires_grad=False):
        self.data = np.ascontiguousarray(data, dtype=np.float32)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self._op = "leaf"
        self._consumed = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def values(self):
        """Row-major flat view of the data."""
        return self.data.reshape(-1)

    def numpy(self):
        return self.data

    def item(self):
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    def backward(self):
        """Reverse-mode sweep from this scalar; leaf grads accumulate."""
        if self.data.size != 1:
            raise DimensionError("backward() needs a scalar loss")
        if self._consumed:
            raise StateError("backward() already ran on this tape; run a new forward pass")
        if self._backward is None and not self.requires_grad:
            raise StateError("loss does not depend on any tensor that requires grad")
        self._consumed = True

        order = []
        seen = set()
        stack = [(self, False)]
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

        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                pg = np.asarray(pg, dtype=np.float32)
                if not np.isfinite(pg).all():
                    raise NonFiniteError(f"{node._op}.backward")
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg


def _result(data, parents, backward, op):
    data = np.asarray(data, dtype=np.float32)
    if not np.isfinite(data).all():
        raise NonFiniteError(op)
    out = Tensor(data)
    out._op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# ops


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")

    def backward(g):
        ga = kernels.matmul(g, np.ascontiguousarray(b.data.T)) if a.requires_grad else None
        gb = kernels.matmul(np.ascontiguousarray(a.data.T), g) if b.requires_grad else None
        return ga, gb

    return _result(kernels.matmul(a.data, b.data), (a, b), backward, "matmul")


def transpose(a):
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise DimensionError("transpose expects a 2-D tensor")
    return _result(a.data.T.copy(), (a,), lambda g: (g.T,), "transpose")


def linear(x, weight, bias=None):
    """``x @ weight.T + bias`` for ``x`` (N, in), ``weight`` (out, in)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise DimensionError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    out = kernels.matmul(x.data, np.ascontiguousarray(weight.data.T))
    parents = [x, weight]
    if bias is not None:
        if bias.shape != (weight.shape[0],):
            raise DimensionError(f"linear: bias {bias.shape} does not match {weight.shape[0]} outputs")
        out = out + bias.data
        parents.append(bias)

    def backward(g):
        gx = kernels.matmul(g, weight.data) if x.requires_grad else None
        gw = kernels.matmul(np.ascontiguousarray(g.T), x.data) if weight.requires_grad else None
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=0, dtype=np.float64) if bias.requires_grad else None)
        return grads

    return _result(out, parents, backward, "linear")


def add_bias(x, bias):
    """Add a per-feature (2-D input) or per-channel (4-D input) bias."""
    x, bias = as_tensor(x), as_tensor(bias)
    if bias.data.ndim != 1 or x.data.ndim not in (2, 4) or x.shape[1] != bias.shape[0]:
        raise DimensionError(f"add_bias: cannot add {bias.shape} to {x.shape}")
    if x.data.ndim == 2:
        out = x.data + bias.data
        reduce_axes = (0,)
    else:
        out = x.data + bias.data[None, :, None, None]
        reduce_axes = (0, 2, 3)

    def backward(g):
        return g, g.sum(axis=reduce_axes, dtype=np.float64)

    return _result(out, (x, bias), backward, "add_bias")


def conv2d(x, kernel, bias=None):
    """3x3 cross-correlation with stride 1 and zero padding 1."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise DimensionError("conv2d expects NCHW input and FC33 kernel")
    if kernel.shape[2:] != (3, 3):
        raise DimensionError(f"conv2d supports 3x3 kernels only, got {kernel.shape[2:]}")
    if kernel.shape[1] != x.shape[1]:
        raise DimensionError(f"conv2d: kernel expects {kernel.shape[1]} channels, input has {x.shape[1]}")
    out = kernels.conv2d_forward(x.data, kernel.data)

    def backward(g):
        gx, gk = kernels.conv2d_backward(x.data, kernel.data, np.ascontiguousarray(g))
        return (gx if x.requires_grad else None, gk if kernel.requires_grad else None)

    y = _result(out, (x, kernel), backward, "conv2d")
    return y if bias is None else add_bias(y, bias)


def relu(x):
    x = as_tensor(x)
    mask = x.data > 0
    return _result(np.where(mask, x.data, np.float32(0.0)), (x,), lambda g: (g * mask,), "relu")


def avgpool2(x):
    """2x2 average pooling with stride 2; H and W must be even."""
    x = as_tensor(x)
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise DimensionError(f"avgpool2 needs even spatial dims, got {(h, w)}")
    out = x.data.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5), dtype=np.float64)

    def backward(g):
        return (np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * np.float32(0.25),)

    return _result(out, (x,), backward, "avgpool2")


def reshape(x, shape):
    x = as_tensor(x)
    shape = tuple(shape)
    if math.prod(shape) != x.data.size:
        raise DimensionError(f"reshape: {x.shape} -> {shape} changes element count")
    orig = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(orig),), "reshape")


def flatten(x):
    x = as_tensor(x)
    return reshape(x, (x.shape[0], math.prod(x.shape[1:])))


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"add: shapes {a.shape} and {b.shape} differ")
    return _result(a.data + b.data, (a, b), lambda g: (g, g), "add")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"mul: shapes {a.shape} and {b.shape} differ")
    return _result(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data), "mul")


def sum(x):  # noqa: A001 - mirrors numpy naming
    x = as_tensor(x)
    total = x.data.sum(dtype=np.float64)
    return _result(total.reshape(()), (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),), "sum")


def softmax_cross_entropy(logits, labels):
    """Mean negative log-likelihood of ``labels`` under ``softmax(logits)``."""
    logits = as_tensor(logits)
    if logits.data.ndim != 2:
        raise DimensionError("softmax_cross_entropy expects (N, K) logits")
    n, k = logits.shape
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.shape[0] != n:
        raise DimensionError(f"{labels.shape[0]} labels for {n} rows of logits")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k})")
    z = logits.data.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    loss = float(np.mean(log_norm - z[rows, labels]))

    def backward(g):
        p = np.exp(z - log_norm[:, None])
        p[rows, labels] -= 1.0
        return (p * (float(np.asarray(g).reshape(-1)[0]) / n),)

    return _result(np.array(loss), (logits,), backward, "softmax_cross_entropy")


# ---------------------------------------------------------------------------
# parameters and optimizer


@dataclass
class Parameter:
    tensor: Tensor
    frozen: bool = False
    velocity: np.ndarray = None


class ParamSet:
    """Ordered, uniquely named parameters with freeze flags and SGD state."""

    def __init__(self):
        self._params = OrderedDict()

    def add(self, name, data, frozen=False):
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(data, requires_grad=not frozen)
        self._params[name] = Parameter(t, frozen)
        return t

    def __getitem__(self, name):
        return self._params[name].tensor

    def __contains__(self, name):
        return name in self._params

    def __iter__(self):
        return iter(self._params)

    def __len__(self):
        return len(self._params)

    def names(self):
        return list(self._params)

    def items(self):
        return [(name, p.tensor) for name, p in self._params.items()]

    def is_frozen(self, name):
        return self._params[name].frozen

    def set_frozen(self, name, frozen=True):
        p = self._params[name]
        p.frozen = bool(frozen)
        p.tensor.requires_grad = not p.frozen
        if p.frozen:
            p.tensor.grad = None
            p.velocity = None

    def set_value(self, name, data):
        t = self._params[name].tensor
        data = np.asarray(data, dtype=np.float32)
        if data.shape != t.shape:
            raise DimensionError(f"{name}: expected shape {t.shape}, got {data.shape}")
        t.data = np.ascontiguousarray(data)

    def frozen_flags(self):
        return {name: p.frozen for name, p in self._params.items()}

    def zero_grad(self):
        for p in self._params.values():
            p.tensor.grad = None

    def reset_state(self):
        """Drop optimizer velocity (fresh optimizer)."""
        for p in self._params.values():
            p.velocity = None

    def velocity(self, name):
        v = self._params[name].velocity
        return np.zeros(self._params[name].tensor.shape) if v is None else v

    def copy(self):
        dup = ParamSet()
        for name, p in self._params.items():
            t = dup.add(name, p.tensor.data.copy(), frozen=p.frozen)
            if p.velocity is not None:
                dup._params[name].velocity = p.velocity.copy()
            del t
        return dup

    def _entries(self):
        return self._params.items()


def sgd_step(params, lr, momentum=0.0, weight_decay=0.0):
    """One SGD-with-momentum update in place; returns ``params``.

    v <- momentum * v + grad + weight_decay * param
    param <- param - lr * v
    Frozen parameters are skipped and keep a zero velocity.
    """
    if not lr > 0:
        raise ValueError(f"lr must be positive, got {lr}")
    updates = []
    for name, p in params._entries():
        if p.frozen:
            continue
        if p.tensor.grad is None:
            raise StateError(f"parameter {name!r} has no gradient; call backward() first")
        updates.append((name, p))
    for name, p in updates:
        w = p.tensor.data.astype(np.float64)
        g = p.tensor.grad.astype(np.float64) + weight_decay * w
        v = g if p.velocity is None else momentum * p.velocity + g
        p.velocity = v
        new = (w - lr * v).astype(np.float32)
        if not np.isfinite(new).all():
            raise NonFiniteError("sgd_step", f"parameter {name!r}")
        p.tensor.data = new
    return params


def kaiming_uniform(shape, fan_in, rng):
    """He-uniform init for ReLU nets: U(-sqrt(6/fan_in), sqrt(6/fan_in))."""
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, shape).astype(np.float32)
