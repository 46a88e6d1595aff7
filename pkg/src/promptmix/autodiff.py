"""Reverse-mode automatic differentiation on dense float64 arrays.

Define-by-run: every operation records its tensor inputs and a
vector-Jacobian-product closure on the output. ``backward`` replays the
recorded graph in reverse construction order, summing contributions when
a tensor feeds several consumers. Graphs are rebuilt from scratch on
every optimization step; nothing persists across steps, and a graph is
confined to the thread that built it.

Everything is double precision. Broadcasting is supported only where the
elementwise kernels need it (bias adds, scalar constants); gradients are
summed back over broadcast axes.
"""

from __future__ import annotations

import itertools
import threading

import numpy as np
from scipy.special import erf

_SQRT2 = float(np.sqrt(2.0))
_INV_SQRT_2PI = float(1.0 / np.sqrt(2.0 * np.pi))

_seq_counter = itertools.count()
_grad_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_grad_state, "enabled", True)


class no_grad:
    """Context manager that disables graph recording."""

    def __enter__(self):
        self._prev = grad_enabled()
        _grad_state.enabled = False
        return self

    def __exit__(self, *exc):
        _grad_state.enabled = self._prev
        return False


class Tensor:
    """Dense float64 tensor participating in the recorded graph.

    ``grad`` is populated by ``backward`` for every tensor on the path
    from the loss that has ``requires_grad`` set; it is overwritten (not
    accumulated) across separate ``backward`` calls.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp", "_seq")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents: tuple = ()
        self._vjp = None
        self._seq = next(_seq_counter)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() on tensor of shape {self.data.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # operator sugar; constants stay plain arrays and never enter the graph
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return scale(sub(self, other), -1.0)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __truediv__(self, s):
        return scale(self, 1.0 / float(s))

    def __getitem__(self, key):
        return take(self, key)


def _node(data: np.ndarray, parents: tuple, vjp) -> Tensor:
    out = Tensor(data)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._vjp = vjp
    return out


def _coerce(x):
    """Split an operand into (tensor-or-None, ndarray)."""
    if isinstance(x, Tensor):
        return x, x.data
    return None, np.asarray(x, dtype=np.float64)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` back down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(a: np.ndarray, b: np.ndarray, op: str):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise kernels


def add(a, b) -> Tensor:
    ta, da = _coerce(a)
    tb, db = _coerce(b)
    _check_broadcast(da, db, "add")
    parents = tuple(t for t in (ta, tb) if t is not None)

    def vjp(g):
        out = []
        if ta is not None:
            out.append(_unbroadcast(g, da.shape))
        if tb is not None:
            out.append(_unbroadcast(g, db.shape))
        return out

    return _node(da + db, parents, vjp)


def sub(a, b) -> Tensor:
    ta, da = _coerce(a)
    tb, db = _coerce(b)
    _check_broadcast(da, db, "sub")
    parents = tuple(t for t in (ta, tb) if t is not None)

    def vjp(g):
        out = []
        if ta is not None:
            out.append(_unbroadcast(g, da.shape))
        if tb is not None:
            out.append(_unbroadcast(-g, db.shape))
        return out

    return _node(da - db, parents, vjp)


def mul(a, b) -> Tensor:
    ta, da = _coerce(a)
    tb, db = _coerce(b)
    _check_broadcast(da, db, "mul")
    parents = tuple(t for t in (ta, tb) if t is not None)

    def vjp(g):
        out = []
        if ta is not None:
            out.append(_unbroadcast(g * db, da.shape))
        if tb is not None:
            out.append(_unbroadcast(g * da, db.shape))
        return out

    return _node(da * db, parents, vjp)


def scale(x: Tensor, s: float) -> Tensor:
    s = float(s)
    return _node(x.data * s, (x,), lambda g: (g * s,))


def log(x: Tensor) -> Tensor:
    data = x.data
    return _node(np.log(data), (x,), lambda g: (g / data,))


def hinge(x: Tensor) -> Tensor:
    """Elementwise max(x, 0); subgradient at 0 is 0."""
    mask = x.data > 0.0
    return _node(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def gelu(x: Tensor) -> Tensor:
    data = x.data
    phi = 0.5 * (1.0 + erf(data / _SQRT2))
    out = data * phi

    def vjp(g):
        pdf = np.exp(-0.5 * data * data) * _INV_SQRT_2PI
        return (g * (phi + data * pdf),)

    return _node(out, (x,), vjp)


# ---------------------------------------------------------------------------
# linear algebra and structure


def matmul(a, b) -> Tensor:
    ta, da = _coerce(a)
    tb, db = _coerce(b)
    if da.ndim < 2 or db.ndim < 2:
        raise ValueError(f"matmul: operands must be >=2-d, got {da.shape} and {db.shape}")
    if da.shape[-1] != db.shape[-2]:
        raise ValueError(f"matmul: incompatible shapes {da.shape} and {db.shape}")
    parents = tuple(t for t in (ta, tb) if t is not None)

    def vjp(g):
        out = []
        if ta is not None:
            out.append(_unbroadcast(g @ np.swapaxes(db, -1, -2), da.shape))
        if tb is not None:
            out.append(_unbroadcast(np.swapaxes(da, -1, -2) @ g, db.shape))
        return out

    return _node(da @ db, parents, vjp)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    return _node(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.data.shape),))


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _node(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def broadcast_to(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    _check_broadcast(x.data, np.empty(shape, dtype=np.float64), "broadcast_to")
    data = np.broadcast_to(x.data, shape).copy()
    return _node(data, (x,), lambda g: (_unbroadcast(g, x.data.shape),))


def concat(tensors, axis: int) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ValueError("concat: empty tensor list")
    shapes = [t.data.shape for t in tensors]
    ref = list(shapes[0])
    for s in shapes[1:]:
        if len(s) != len(ref) or any(
            i != axis % len(ref) and s[i] != ref[i] for i in range(len(ref))
        ):
            raise ValueError(f"concat: incompatible shapes {shapes[0]} and {s}")
    sizes = [s[axis] for s in shapes]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        return [
            np.take(g, np.arange(offsets[i], offsets[i + 1]), axis=axis)
            for i in range(len(sizes))
        ]

    return _node(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), vjp)


def take(x: Tensor, key) -> Tensor:
    data = x.data[key]

    def vjp(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, key, g)
        return (gx,)

    return _node(np.array(data, dtype=np.float64, copy=True), (x,), vjp)


# ---------------------------------------------------------------------------
# reductions


def _axis_size(shape, axis):
    return int(np.prod(shape)) if axis is None else shape[axis]


def sum_(x: Tensor, axis=None) -> Tensor:
    data = x.data.sum(axis=axis)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, x.data.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.data.shape).copy(),)

    return _node(data, (x,), vjp)


def mean(x: Tensor, axis=None) -> Tensor:
    n = _axis_size(x.data.shape, axis)
    data = x.data.mean(axis=axis)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g / n, x.data.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis) / n, x.data.shape).copy(),)

    return _node(data, (x,), vjp)


def variance(x: Tensor, axis=None, ddof: int = 1) -> Tensor:
    """Variance reduction; the default denominator is count - 1."""
    n = _axis_size(x.data.shape, axis)
    if n - ddof < 1:
        raise ValueError(
            f"variance over {n} element(s) with ddof={ddof}: denominator undefined"
        )
    mu = x.data.mean(axis=axis, keepdims=True)
    dev = x.data - mu
    data = (dev * dev).sum(axis=axis) / (n - ddof)

    def vjp(g):
        ge = g if axis is None else np.expand_dims(g, axis)
        return (2.0 * dev / (n - ddof) * ge,)

    return _node(data, (x,), vjp)


def max_(x: Tensor, axis: int) -> Tensor:
    """Max reduction; gradient routes to the first argmax along the axis."""
    data = x.data.max(axis=axis)
    idx = np.expand_dims(x.data.argmax(axis=axis), axis)

    def vjp(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, idx, np.expand_dims(g, axis), axis=axis)
        return (gx,)

    return _node(data, (x,), vjp)


# ---------------------------------------------------------------------------
# composite kernels


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        inner = (g * s).sum(axis=axis, keepdims=True)
        return (s * (g - inner),)

    return _node(s, (x,), vjp)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    d = x.data.shape[-1]
    if gamma.data.shape != (d,) or beta.data.shape != (d,):
        raise ValueError(
            f"layer_norm: scale/shift shapes {gamma.data.shape}/{beta.data.shape} "
            f"do not match feature dim {d}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = (x.data - mu) * inv
    out = y * gamma.data + beta.data

    def vjp(g):
        gy = g * gamma.data
        m1 = gy.mean(axis=-1, keepdims=True)
        m2 = (gy * y).mean(axis=-1, keepdims=True)
        gx = (gy - m1 - y * m2) * inv
        axes = tuple(range(g.ndim - 1))
        return gx, (g * y).sum(axis=axes), g.sum(axis=axes)

    return _node(out, (x, gamma, beta), vjp)


def l2_normalize(x: Tensor, axis: int = -1) -> Tensor:
    norm = np.linalg.norm(x.data, axis=axis, keepdims=True)
    if np.any(norm == 0.0):
        raise ValueError("l2_normalize: zero-norm slice")
    y = x.data / norm

    def vjp(g):
        inner = (g * y).sum(axis=axis, keepdims=True)
        return ((g - y * inner) / norm,)

    return _node(y, (x,), vjp)


def l1_distance(a, b) -> Tensor:
    """Sum of absolute differences; subgradient 0 at exact ties."""
    ta, da = _coerce(a)
    tb, db = _coerce(b)
    if da.shape != db.shape:
        raise ValueError(f"l1_distance: incompatible shapes {da.shape} and {db.shape}")
    diff = da - db
    sgn = np.sign(diff)
    parents = tuple(t for t in (ta, tb) if t is not None)

    def vjp(g):
        out = []
        if ta is not None:
            out.append(g * sgn)
        if tb is not None:
            out.append(-g * sgn)
        return out

    return _node(np.abs(diff).sum(), parents, vjp)


def cosine_similarity(a: Tensor, b: Tensor) -> Tensor:
    da, db = a.data, b.data
    if da.shape != db.shape or da.ndim != 1:
        raise ValueError(
            f"cosine_similarity: expected equal 1-d shapes, got {da.shape} and {db.shape}"
        )
    na = np.linalg.norm(da)
    nb = np.linalg.norm(db)
    if na == 0.0 or nb == 0.0:
        raise ValueError("cosine_similarity: zero-norm input")
    c = float(da @ db / (na * nb))

    def vjp(g):
        ga = g * (db / (na * nb) - c * da / (na * na))
        gb = g * (da / (na * nb) - c * db / (nb * nb))
        return ga, gb

    return _node(np.float64(c), (a, b), vjp)


# ---------------------------------------------------------------------------
# backward pass and the finite-difference oracle


def backward(loss: Tensor) -> dict:
    """Propagate d(loss)/d(tensor) through the recorded graph.

    Returns a map from leaf tensors (those with no recorded parents and
    ``requires_grad`` set) to their gradient arrays; every tensor visited
    also gets ``grad`` assigned. The map is empty for a constant-only
    graph.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    if not loss.requires_grad:
        return {}

    nodes = []
    seen = {id(loss)}
    stack = [loss]
    while stack:
        t = stack.pop()
        nodes.append(t)
        for p in t._parents:
            if p.requires_grad and id(p) not in seen:
                seen.add(id(p))
                stack.append(p)
    nodes.sort(key=lambda t: t._seq, reverse=True)

    grads = {id(loss): np.ones_like(loss.data)}
    leaves = {}
    for t in nodes:
        g = grads.pop(id(t), None)
        if g is None:
            continue
        t.grad = g
        if t._vjp is None:
            leaves[t] = g
            continue
        parent_grads = t._vjp(g)
        for p, pg in zip(t._parents, parent_grads):
            if not p.requires_grad or pg is None:
                continue
            acc = grads.get(id(p))
            grads[id(p)] = pg if acc is None else acc + pg
    return leaves


def finite_difference_check(f, x: Tensor, h: float = 1e-5, zero_tol: float = 1e-7) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` must be a scalar-valued tensor function, smooth at ``x``. The
    error at each coordinate is |analytic - central| / (|central| + 1e-12).
    When both the analytic and the central value fall below ``zero_tol``
    the coordinate counts as exact: at a genuine zero of the gradient the
    central difference is pure truncation noise and the relative form
    would report O(1) error for a correct derivative.
    """
    if h <= 0.0:
        raise ValueError(f"finite_difference_check: step must be positive, got {h}")
    x.requires_grad = True
    x.grad = None
    out = f(x)
    backward(out)
    analytic = np.zeros_like(x.data) if x.grad is None else np.asarray(x.grad)

    flat = x.data.reshape(-1)
    worst = 0.0
    for i in range(flat.size):
        orig = flat[i]
        with no_grad():
            flat[i] = orig + h
            f_plus = f(x).item()
            flat[i] = orig - h
            f_minus = f(x).item()
        flat[i] = orig
        central = (f_plus - f_minus) / (2.0 * h)
        a = analytic.reshape(-1)[i]
        if abs(a) < zero_tol and abs(central) < zero_tol:
            continue
        worst = max(worst, abs(a - central) / (abs(central) + 1e-12))
    return worst
