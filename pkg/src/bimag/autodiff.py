"""Dense 2-D tensors with define-by-run reverse-mode differentiation.

Every value is a float64 matrix. Operations record their parents and a
closure mapping the output gradient to parent gradients; :func:`backward`
walks the recorded graph once in reverse topological order.

A small Adam optimizer and Glorot initialization live here as well, since
they only touch raw parameter arrays.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Sequence

import numpy as np

from .exceptions import GraphError, NumericError, ShapeError

LOGVAR_MIN = -10.0
LOGVAR_MAX = 10.0

_recording = True


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording a graph (frozen models, inference)."""
    global _recording
    prev, _recording = _recording, False
    try:
        yield
    finally:
        _recording = prev


class Tensor:
    """A finite float64 matrix that can take part in a computation graph."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_op", "_consumed")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim != 2:
            raise ShapeError(f"tensors are 2-D, got shape {arr.shape}")
        if not np.isfinite(arr).all():
            raise NumericError(f"non-finite value in tensor {name or ''}".rstrip())
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self._op = "leaf"
        self._consumed = False

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self.data[0, 0])

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self._op}{tag})"

    # operator sugar for composing losses
    def __add__(self, other):
        return add(self, _lift(other))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scale(_lift(other), -1.0))

    def __rsub__(self, other):
        return add(_lift(other), scale(self, -1.0))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, _lift(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, _lift(other))


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    if not np.isfinite(data).all():
        raise NumericError(f"non-finite result in op '{op}'")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._consumed = False
    out._op = op
    if _recording and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    if grad.shape == shape:
        return grad
    if shape[0] == 1 and grad.shape[0] != 1:
        grad = grad.sum(axis=0, keepdims=True)
    if shape[1] == 1 and grad.shape[1] != 1:
        grad = grad.sum(axis=1, keepdims=True)
    return grad


def _broadcast_shape(a, b, op):
    rows = a[0] if b[0] in (1, a[0]) else (b[0] if a[0] == 1 else None)
    cols = a[1] if b[1] in (1, a[1]) else (b[1] if a[1] == 1 else None)
    if rows is None or cols is None:
        raise ShapeError(f"{op}: cannot broadcast shapes {a} and {b}")
    return rows, cols


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a.shape, b.shape, "add")
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _node(a.data + b.data, (a, b), backward, "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a.shape, b.shape, "mul")
    ad, bd = a.data, b.data

    def backward(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _node(ad * bd, (a, b), backward, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    return _node(a.data * c, (a,), lambda g: (g * c,), "scale")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        return g @ bd.T, ad.T @ g

    return _node(ad @ bd, (a, b), backward, "matmul")


def affine(x: Tensor, W: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """``x @ W + b`` with ``b`` broadcast over rows."""
    if x.shape[1] != W.shape[0]:
        raise ShapeError(f"affine: x {x.shape} incompatible with W {W.shape}")
    if b is not None and b.shape != (1, W.shape[1]):
        raise ShapeError(f"affine: bias {b.shape} incompatible with W {W.shape}")
    xd, Wd = x.data, W.data
    out = xd @ Wd
    if b is None:
        return _node(out, (x, W), lambda g: (g @ Wd.T, xd.T @ g), "affine")
    out = out + b.data
    return _node(out, (x, W, b), lambda g: (g @ Wd.T, xd.T @ g, g.sum(axis=0, keepdims=True)), "affine")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _node(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,), "exp")


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    inside = (a.data >= lo) & (a.data <= hi)
    return _node(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,), "clamp")


def concat(parts: Sequence[Tensor]) -> Tensor:
    """Column-wise concatenation."""
    rows = {p.shape[0] for p in parts}
    if len(rows) != 1:
        raise ShapeError(f"concat: row counts differ, {[p.shape for p in parts]}")
    bounds = np.cumsum([0] + [p.shape[1] for p in parts])

    def backward(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(parts)))

    return _node(np.concatenate([p.data for p in parts], axis=1), tuple(parts), backward, "concat")


def columns(a: Tensor, start: int, stop: int) -> Tensor:
    if not 0 <= start < stop <= a.shape[1]:
        raise ShapeError(f"columns: [{start}, {stop}) out of range for {a.shape}")
    shape = a.shape

    def backward(g):
        full = np.zeros(shape)
        full[:, start:stop] = g
        return (full,)

    return _node(a.data[:, start:stop].copy(), (a,), backward, "columns")


def tsum(a: Tensor) -> Tensor:
    return _node(np.array([[a.data.sum()]]), (a,), lambda g: (np.full(a.shape, g[0, 0]),), "sum")


def mean(a: Tensor) -> Tensor:
    n = a.data.size
    return _node(np.array([[a.data.mean()]]), (a,), lambda g: (np.full(a.shape, g[0, 0] / n),), "mean")


# ---------------------------------------------------------------------------
# fused losses
# ---------------------------------------------------------------------------

def softmax(scores: np.ndarray) -> np.ndarray:
    """Row-wise softmax of a plain array, stabilized by max subtraction."""
    shifted = scores - scores.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean over rows of ``-log softmax(logits)[label]``."""
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    n, k = logits.shape
    if n < 1:
        raise ShapeError("softmax_cross_entropy: empty batch")
    if labels.shape[0] != n:
        raise ShapeError(f"softmax_cross_entropy: {labels.shape[0]} labels for {n} rows")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        bad = labels[(labels < 0) | (labels >= k)][0]
        raise IndexError(f"label {bad} outside [0, {k})")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    z = e.sum(axis=1, keepdims=True)
    rows = np.arange(n)
    loss = np.mean(np.log(z[:, 0]) - shifted[rows, labels])
    probs = e / z

    def backward(g):
        d = probs.copy()
        d[rows, labels] -= 1.0
        return (d * (g[0, 0] / n),)

    return _node(np.array([[loss]]), (logits,), backward, "softmax_cross_entropy")


def l2_distance(p: Tensor, q: Tensor) -> Tensor:
    """Mean over rows of the squared Euclidean distance between ``p`` and ``q``."""
    if p.shape != q.shape:
        raise ShapeError(f"l2_distance: shapes differ, {p.shape} vs {q.shape}")
    diff = p.data - q.data
    n = p.shape[0]
    value = np.array([[np.sum(diff * diff) / n]])

    def backward(g):
        gp = diff * (2.0 * g[0, 0] / n)
        return gp, -gp

    return _node(value, (p, q), backward, "l2_distance")


def gaussian_kl(mu: Tensor, logvar: Tensor) -> Tensor:
    """KL(N(mu, exp(logvar)) || N(0, I)), summed over columns, averaged over rows."""
    if mu.shape != logvar.shape:
        raise ShapeError(f"gaussian_kl: shapes differ, {mu.shape} vs {logvar.shape}")
    n = mu.shape[0]
    var = np.exp(logvar.data)
    value = 0.5 * np.sum(var + mu.data ** 2 - 1.0 - logvar.data) / n
    md = mu.data

    def backward(g):
        c = g[0, 0] / n
        return md * c, 0.5 * (var - 1.0) * c

    return _node(np.array([[value]]), (mu, logvar), backward, "gaussian_kl")


def reparameterize(mu: Tensor, logvar: Tensor, rng: Optional[np.random.Generator] = None,
                   noise: Optional[np.ndarray] = None) -> Tensor:
    """``mu + exp(logvar / 2) * eps`` with ``eps ~ N(0, I)`` drawn from ``rng``.

    ``noise`` overrides the draw. ``logvar`` is clamped to the same range the
    encoder uses, so extreme inputs degrade to ``mu`` rather than overflowing.
    """
    if mu.shape != logvar.shape:
        raise ShapeError(f"reparameterize: shapes differ, {mu.shape} vs {logvar.shape}")
    if noise is None:
        if rng is None:
            raise ValueError("reparameterize needs an rng or explicit noise")
        noise = rng.standard_normal(mu.shape)
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape != mu.shape:
        raise ShapeError(f"reparameterize: noise {noise.shape} vs {mu.shape}")
    std = exp(scale(clamp(logvar, LOGVAR_MIN, LOGVAR_MAX), 0.5))
    return add(mu, mul(std, Tensor(noise)))


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

def _topological(root: Tensor) -> List[Tensor]:
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    A graph can be differentiated once; build a fresh one for the next step.
    """
    if loss.shape != (1, 1):
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise GraphError("backward already called on this graph; rebuild it before differentiating again")
    if not loss.requires_grad:
        raise GraphError("loss does not depend on any tensor that requires grad")
    order = _topological(loss)
    grads: Dict[int, np.ndarray] = {id(loss): np.ones((1, 1))}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg
    for node in order:
        if node._backward is not None:
            node._backward = None
            node._parents = ()
    loss._consumed = True


# ---------------------------------------------------------------------------
# parameters and optimization
# ---------------------------------------------------------------------------

def glorot(fan_in: int, fan_out: int, rng: np.random.Generator, name: str) -> Tensor:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-limit, limit, size=(fan_in, fan_out)), requires_grad=True, name=name)


def zeros(rows: int, cols: int, name: str) -> Tensor:
    return Tensor(np.zeros((rows, cols)), requires_grad=True, name=name)


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray],
              state: AdamState, lr: float) -> Dict[str, np.ndarray]:
    """Bias-corrected Adam update, applied in place to ``params``."""
    if not lr > 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        if g.shape != params[name].shape:
            raise ShapeError(f"gradient for {name!r} has shape {g.shape}, parameter {params[name].shape}")
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient for parameter {name!r}")
    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    for name, g in grads.items():
        p = params[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return params


class Adam:
    """Adam over a list of named parameter tensors."""

    def __init__(self, params: Iterable[Tensor], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        names = [p.name for p in self.params]
        if None in names or len(set(names)) != len(names):
            raise ValueError("Adam needs uniquely named parameters")
        self.lr = lr
        self.state = AdamState(beta1=beta1, beta2=beta2, eps=eps)

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        params = {p.name: p.data for p in self.params}
        # parameters the loss never reached keep their values and moments
        grads = {p.name: p.grad for p in self.params if p.grad is not None}
        adam_step(params, grads, self.state, self.lr)
