"""Minimal reverse-mode autodiff over float64 numpy arrays.

Also hosts the Gumbel-max / straight-through Gumbel-softmax machinery, the
losses used by the searches, two optimizers and parameter snapshots.
"""

from __future__ import annotations

import struct
from typing import NamedTuple, Sequence

import numpy as np

from .errors import ReluPlanError, ShapeError


class Tensor:
    """A node in the computation graph: value, accumulated gradient, parents."""

    __slots__ = ("value", "grad", "_parents", "_backward", "requires_grad", "name")
    __array_ufunc__ = None  # make numpy defer to our reflected operators

    def __init__(self, value, requires_grad=False, parents=(), backward=None, name=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self._parents = parents
        self._backward = backward
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def detach(self) -> "Tensor":
        return Tensor(self.value.copy())

    def zero_grad(self):
        self.grad = None

    def item(self) -> float:
        return float(self.value)

    def _acc(self, g):
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def backward(self, grad=None):
        backward(self, grad)

    __add__ = lambda self, other: add(self, other)
    __radd__ = lambda self, other: add(other, self)
    __sub__ = lambda self, other: sub(self, other)
    __rsub__ = lambda self, other: sub(other, self)
    __mul__ = lambda self, other: mul(self, other)
    __rmul__ = lambda self, other: mul(other, self)
    __neg__ = lambda self: mul(self, -1.0)
    __matmul__ = lambda self, other: matmul(self, other)
    __rmatmul__ = lambda self, other: matmul(other, self)


def parameter(value) -> Tensor:
    return Tensor(np.array(value, dtype=np.float64, copy=True), requires_grad=True)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


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
        raise ShapeError(f"cannot broadcast {a.shape} with {b.shape}") from exc


def backward(root: Tensor, grad=None):
    """Accumulate d(root)/d(node) into ``.grad`` of every reachable node.

    Nodes are visited once each, in reverse topological order.
    """
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
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    if grad is None:
        if root.value.size != 1:
            raise ShapeError("backward without an explicit gradient needs a scalar root")
        grad = np.ones_like(root.value)
    root.grad = np.array(grad, dtype=np.float64, copy=True)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


# -- core ops ----------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)

    def bw(g):
        a._acc(_unbroadcast(g, a.shape))
        b._acc(_unbroadcast(g, b.shape))

    return Tensor(a.value + b.value, parents=(a, b), backward=bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)

    def bw(g):
        a._acc(_unbroadcast(g, a.shape))
        b._acc(_unbroadcast(-g, b.shape))

    return Tensor(a.value - b.value, parents=(a, b), backward=bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)

    def bw(g):
        a._acc(_unbroadcast(g * b.value, a.shape))
        b._acc(_unbroadcast(g * a.value, b.shape))

    return Tensor(a.value * b.value, parents=(a, b), backward=bw)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shapes {a.shape} and {b.shape} do not align")

    def bw(g):
        a._acc(g @ b.value.T)
        b._acc(a.value.T @ g)

    return Tensor(a.value @ b.value, parents=(a, b), backward=bw)


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.value > 0

    def bw(g):
        x._acc(g * mask)

    return Tensor(np.where(mask, x.value, 0.0), parents=(x,), backward=bw)


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.value)

    def bw(g):
        x._acc(g * out)

    return Tensor(out, parents=(x,), backward=bw)


def log(x) -> Tensor:
    x = as_tensor(x)
    if np.any(x.value <= 0):
        raise ReluPlanError("log of a non-positive value")

    def bw(g):
        x._acc(g / x.value)

    return Tensor(np.log(x.value), parents=(x,), backward=bw)


def square(x) -> Tensor:
    x = as_tensor(x)

    def bw(g):
        x._acc(2.0 * g * x.value)

    return Tensor(x.value ** 2, parents=(x,), backward=bw)


def tensor_sum(x, axis=None) -> Tensor:
    x = as_tensor(x)

    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        x._acc(np.broadcast_to(g, x.shape))

    return Tensor(x.value.sum(axis=axis), parents=(x,), backward=bw)


def mean(x, axis=None) -> Tensor:
    x = as_tensor(x)
    n = x.value.size if axis is None else x.shape[axis]

    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        x._acc(np.broadcast_to(g / n, x.shape))

    return Tensor(x.value.mean(axis=axis), parents=(x,), backward=bw)


def softmax(x, axis=-1) -> Tensor:
    x = as_tensor(x)
    z = x.value - x.value.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        x._acc(out * (g - (g * out).sum(axis=axis, keepdims=True)))

    return Tensor(out, parents=(x,), backward=bw)


def log_softmax(x, axis=-1) -> Tensor:
    x = as_tensor(x)
    z = x.value - x.value.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def bw(g):
        x._acc(g - p * g.sum(axis=axis, keepdims=True))

    return Tensor(out, parents=(x,), backward=bw)


def pick(x, index) -> Tensor:
    """Select x[index] (any numpy basic/advanced index) with scatter-add backward."""
    x = as_tensor(x)

    def bw(g):
        full = np.zeros_like(x.value)
        np.add.at(full, index, g)
        x._acc(full)

    return Tensor(x.value[index], parents=(x,), backward=bw)


def stack(items: Sequence[Tensor]) -> Tensor:
    items = [as_tensor(t) for t in items]
    shapes = {t.shape for t in items}
    if len(shapes) != 1:
        raise ShapeError(f"cannot stack shapes {sorted(shapes)}")

    def bw(g):
        for i, t in enumerate(items):
            t._acc(g[i])

    return Tensor(np.stack([t.value for t in items]), parents=tuple(items), backward=bw)


# -- losses ------------------------------------------------------------------


def _check_labels(logits: Tensor, labels):
    labels = np.asarray(labels, dtype=np.int64)
    if logits.value.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"logits {logits.shape} and labels {labels.shape} do not match")
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise ReluPlanError("label out of range", classes=int(logits.shape[1]))
    return labels


def cross_entropy(logits, labels) -> Tensor:
    """Mean negative log-likelihood of integer labels under softmax(logits)."""
    logits = as_tensor(logits)
    labels = _check_labels(logits, labels)
    lp = log_softmax(logits, axis=1)
    return -mean(pick(lp, (np.arange(labels.size), labels)))


def kd_loss(student_logits, teacher_logits, labels) -> Tensor:
    """Cross-entropy plus the squared L2 distance to the teacher logits.

    The distance term is a per-sample squared norm averaged over the batch, so it
    is on the same footing as the batch-mean cross-entropy.
    """
    s = as_tensor(student_logits)
    t = as_tensor(teacher_logits)
    if s.shape != t.shape:
        raise ShapeError(f"student {s.shape} and teacher {t.shape} logits differ")
    ce = cross_entropy(s, labels)
    dist = mean(tensor_sum(square(s - t.detach()), axis=1))
    return ce + dist


def mse(pred, target) -> Tensor:
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {pred.shape} and target {target.shape} differ")
    return mean(square(pred - target))


# -- Gumbel ------------------------------------------------------------------

_U_EPS = np.finfo(np.float64).tiny


def gumbel_noise(rng: np.random.Generator, size) -> np.ndarray:
    u = rng.random(size)
    u = np.clip(u, _U_EPS, 1.0 - np.finfo(np.float64).epsneg)
    return -np.log(-np.log(u))


def _log_probs(beta) -> np.ndarray:
    beta = np.asarray(beta, dtype=np.float64)
    if beta.ndim != 1 or beta.size < 1:
        raise ShapeError("beta must be a non-empty vector")
    if not np.all(np.isfinite(beta)):
        raise ReluPlanError("beta contains non-finite logits")
    z = beta - beta.max()
    return z - np.log(np.exp(z).sum())


def one_hot(index: int, k: int) -> np.ndarray:
    out = np.zeros(k)
    out[index] = 1.0
    return out


def gumbel_sample(beta, rng: np.random.Generator, noise=None) -> np.ndarray:
    """One-hot at argmax_i (G_i + log softmax(beta)_i) with i.i.d. standard Gumbel G."""
    lp = _log_probs(beta.value if isinstance(beta, Tensor) else beta)
    g = gumbel_noise(rng, lp.size) if noise is None else noise
    return one_hot(int(np.argmax(lp + g)), lp.size)


class GumbelDraw(NamedTuple):
    hard: Tensor  # value is the one-hot sample, gradient flows through `relaxed`
    relaxed: Tensor
    index: int


def gumbel_softmax_st(beta: Tensor, tau: float, rng: np.random.Generator, noise=None) -> GumbelDraw:
    """Straight-through Gumbel-softmax.

    Forward is the hard one-hot of the Gumbel-max draw; the relaxed vector is
    softmax((log softmax(beta) + G) / tau) with the same noise, and the hard
    output back-propagates as if it were the relaxed one.
    """
    if not tau > 0:
        raise ReluPlanError("temperature must be positive", tau=tau)
    beta = as_tensor(beta)
    lp_value = _log_probs(beta.value)
    g = gumbel_noise(rng, lp_value.size) if noise is None else np.asarray(noise, dtype=np.float64)
    index = int(np.argmax(lp_value + g))
    relaxed = softmax(mul(add(log_softmax(beta), g), 1.0 / tau))
    hard_value = one_hot(index, lp_value.size)
    hard = add(sub(relaxed, relaxed.value), hard_value)
    hard.value = hard_value  # exact one-hot; the arithmetic above can leave 1e-17 residue
    return GumbelDraw(hard, relaxed, index)


def linear_tau(epoch: int, epochs: int, tau_start: float, tau_end: float) -> float:
    if epochs <= 1:
        return tau_start
    return tau_start + (tau_end - tau_start) * epoch / (epochs - 1)


# -- optimizers --------------------------------------------------------------


def clip_grad_norm(params: Sequence[Tensor], max_norm: float) -> float:
    grads = [p.grad for p in params if p.grad is not None]
    total = float(np.sqrt(sum(float((g * g).sum()) for g in grads))) if grads else 0.0
    if max_norm and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for g in grads:
            g *= scale
    return total


class SGD:
    """SGD with (optionally Nesterov) momentum and L2 weight decay."""

    def __init__(self, params, lr=0.025, momentum=0.9, weight_decay=3e-4, nesterov=True):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.nesterov = nesterov
        self._buf = [np.zeros_like(p.value) for p in self.params]
        self.steps = 0

    def step(self):
        for p, buf in zip(self.params, self._buf):
            if p.grad is None:
                continue
            g = p.grad + self.weight_decay * p.value
            buf *= self.momentum
            buf += g
            update = g + self.momentum * buf if self.nesterov else buf
            p.value = p.value - self.lr * update
        self.steps += 1

    def zero_grad(self):
        for p in self.params:
            p.grad = None


class Adam:
    """Adam with L2 weight decay folded into the gradient."""

    def __init__(self, params, lr=3e-4, betas=(0.9, 0.999), eps=1e-8, weight_decay=1e-3):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self._m = [np.zeros_like(p.value) for p in self.params]
        self._v = [np.zeros_like(p.value) for p in self.params]
        self.steps = 0

    def step(self):
        self.steps += 1
        c1 = 1 - self.b1 ** self.steps
        c2 = 1 - self.b2 ** self.steps
        for p, m, v in zip(self.params, self._m, self._v):
            if p.grad is None:
                continue
            g = p.grad + self.weight_decay * p.value
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p.value = p.value - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self):
        for p in self.params:
            p.grad = None


# -- snapshots ---------------------------------------------------------------


def snapshot(params: Sequence[Tensor]) -> bytes:
    """Flat little-endian float64 dump prefixed by its u64 element count."""
    flat = np.concatenate([p.value.ravel() for p in params]) if params else np.zeros(0)
    return struct.pack("<Q", flat.size) + flat.astype("<f8").tobytes()


def load_snapshot(blob: bytes) -> np.ndarray:
    if len(blob) < 8:
        raise ShapeError("snapshot is shorter than its header")
    (n,) = struct.unpack_from("<Q", blob)
    if 8 + 8 * n != len(blob):
        raise ShapeError("snapshot length does not match its header")
    return np.frombuffer(blob, dtype="<f8", count=n, offset=8).astype(np.float64)


def restore(params: Sequence[Tensor], flat: np.ndarray):
    offset = 0
    for p in params:
        n = p.value.size
        if offset + n > flat.size:
            raise ShapeError("snapshot too short for parameters")
        p.value = flat[offset:offset + n].reshape(p.shape).copy()
        offset += n
    if offset != flat.size:
        raise ShapeError("snapshot longer than parameters")


# -- finite differences ------------------------------------------------------


def numeric_grad(f, x: np.ndarray, step: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of scalar f at x."""
    x = np.array(x, dtype=np.float64, copy=True)
    out = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        orig = x[i]
        x[i] = orig + step
        hi = f(x)
        x[i] = orig - step
        lo = f(x)
        x[i] = orig
        out[i] = (hi - lo) / (2 * step)
    return out


def max_relative_error(analytic, numeric, floor: float = 1e-8) -> float:
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float((np.abs(a - n) / denom).max()) if a.size else 0.0
