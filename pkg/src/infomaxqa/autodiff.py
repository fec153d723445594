"""Reverse-mode automatic differentiation over dense float64 arrays.

A small dynamic-tape engine: every primitive records its inputs and a
vector-Jacobian closure when gradients are enabled, and ``backward`` walks
the recorded graph once in reverse topological order.  The primitive set is
deliberately minimal; everything else in the package (softmax, layer norm,
the loss objectives) is composed from it.

All data is float64.  Graphs are rebuilt on every forward pass, so shapes
may vary freely between steps.  A graph is single-threaded; independent
graphs never share state except through leaf tensors.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Input shapes do not conform to a primitive's rule."""


class DomainError(ValueError):
    """Input values fall outside a primitive's documented domain."""


class GraphError(RuntimeError):
    """Misuse of the computation graph (bad root, stale reuse)."""


_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad():
    """Disable tape recording inside the block (pure forward evaluation)."""
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Tensor:
    """Dense float64 array, optionally participating in a reverse-mode graph.

    ``grad`` is populated by ``backward`` for every reachable tensor with
    ``requires_grad`` and accumulates additively across multiple uses.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp", "_op",
                 "_spent", "_grad_owned")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable[[np.ndarray], tuple] | None = None
        self._op = "leaf"
        self._spent = False
        self._grad_owned = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def reset_grad(self) -> None:
        """Clear the accumulated gradient and allow a new backward pass."""
        self.grad = None
        self._spent = False
        self._grad_owned = False

    def __repr__(self) -> str:
        return f"Tensor(op={self._op}, shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar; scalars are treated as constants
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return subtract(self, other)

    def __rsub__(self, other):
        return subtract(other, self)

    def __mul__(self, other):
        return multiply(self, other)

    def __rmul__(self, other):
        return multiply(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def _make_node(op: str, data: np.ndarray, parents: tuple[Tensor, ...],
               vjp: Callable[[np.ndarray], tuple]) -> Tensor:
    out = Tensor(data)
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._vjp = vjp
        out._op = op
    else:
        out._op = op
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _check_broadcast(op: str, a: np.ndarray, b: np.ndarray) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("add", a.data, b.data)

    def vjp(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(g, b.shape) if b.requires_grad else None)

    return _make_node("add", a.data + b.data, (a, b), vjp)


def subtract(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("subtract", a.data, b.data)

    def vjp(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(-g, b.shape) if b.requires_grad else None)

    return _make_node("subtract", a.data - b.data, (a, b), vjp)


def multiply(a, b) -> Tensor:
    """Elementwise product; a python scalar operand acts as scalar-scale."""
    if isinstance(b, (int, float)):
        return scale(a, float(b))
    if isinstance(a, (int, float)):
        return scale(b, float(a))
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("multiply", a.data, b.data)

    def vjp(g):
        return (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(g * a.data, b.shape) if b.requires_grad else None)

    return _make_node("multiply", a.data * b.data, (a, b), vjp)


def scale(a, c: float) -> Tensor:
    a = _as_tensor(a)
    c = float(c)

    def vjp(g):
        return (g * c,)

    return _make_node("scale", a.data * c, (a,), vjp)


def matmul(a, b) -> Tensor:
    """Matrix product, including the batched 3-D forms the encoder uses:
    (B,T,K)@(K,N), (B,T,K)@(B,K,N) and (B,T,K)@(K,)."""
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim not in (1, 2, 3) or bd.ndim not in (1, 2, 3):
        raise ShapeError(f"matmul: operands must be 1-D to 3-D, got {ad.shape} @ {bd.shape}")
    inner = bd.shape[-2] if bd.ndim >= 2 else bd.shape[0]
    if ad.shape[-1] != inner:
        raise ShapeError(f"matmul: inner dimensions disagree: {ad.shape} @ {bd.shape}")
    if ad.ndim == 3 and bd.ndim == 3 and ad.shape[0] != bd.shape[0]:
        raise ShapeError(f"matmul: batch dimensions disagree: {ad.shape} @ {bd.shape}")

    def vjp(g):
        na, nb = ad.ndim, bd.ndim
        if na == 2 and nb == 2:
            ga, gb = g @ bd.T, ad.T @ g
        elif na == 2 and nb == 1:
            ga, gb = np.outer(g, bd), ad.T @ g
        elif na == 1 and nb == 2:
            ga, gb = g @ bd.T, np.outer(ad, g)
        elif na == 1 and nb == 1:  # dot product, g is scalar
            ga, gb = g * bd, g * ad
        elif na == 3 and nb == 2:
            ga = g @ bd.T
            gb = np.tensordot(ad, g, axes=([0, 1], [0, 1]))
        elif na == 3 and nb == 3:
            ga = g @ bd.transpose(0, 2, 1)
            gb = ad.transpose(0, 2, 1) @ g
        elif na == 3 and nb == 1:
            ga = g[..., None] * bd
            gb = np.tensordot(g, ad, axes=([0, 1], [0, 1]))
        else:
            raise ShapeError(f"matmul: unsupported combination {ad.shape} @ {bd.shape}")
        return (ga if a.requires_grad else None, gb if b.requires_grad else None)

    return _make_node("matmul", ad @ bd, (a, b), vjp)


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    z = np.exp(-np.abs(x))  # overflow-safe for any sign
    out = np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z))

    def vjp(g):
        return (g * out * (1.0 - out),)

    return _make_node("sigmoid", out, (a,), vjp)


def log(a, clamp: float | None = None) -> Tensor:
    """Natural log.

    With ``clamp`` set, the input is floored at that value before the log
    (gradient is zero in the clamped region).  Loss call sites use
    ``clamp=1e-12`` so saturated probabilities stay finite; everywhere else
    non-positive input is a domain error.
    """
    a = _as_tensor(a)
    if clamp is None:
        if np.any(a.data <= 0.0):
            raise DomainError("log: input must be strictly positive")
        x = a.data
        mask = None
    else:
        x = np.maximum(a.data, clamp)
        mask = a.data > clamp

    def vjp(g):
        gx = g / x
        if mask is not None:
            gx = gx * mask
        return (gx,)

    return _make_node("log", np.log(x), (a,), vjp)


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)

    def vjp(g):
        return (g * out,)

    return _make_node("exp", out, (a,), vjp)


def _check_axis(op: str, a: Tensor, axis: int | None) -> None:
    if axis is not None and not -a.ndim <= axis < a.ndim:
        raise ShapeError(f"{op}: axis {axis} out of range for shape {a.shape}")


def mean(a, axis: int | None = None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    _check_axis("mean", a, axis)
    n = a.data.size if axis is None else a.data.shape[axis]
    out = a.data.mean(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            gx = np.full(a.shape, g / n)
        else:
            gx = np.broadcast_to(np.expand_dims(g, axis) if not keepdims else g,
                                 a.shape) / n
        return (gx,)

    return _make_node("mean", out, (a,), vjp)


def amax(a, axis: int | None = None, keepdims: bool = False) -> Tensor:
    """Max over an axis. Ties route the gradient to the first maximal element."""
    a = _as_tensor(a)
    _check_axis("max", a, axis)
    out = a.data.max(axis=axis, keepdims=keepdims)

    def vjp(g):
        gx = np.zeros(a.shape)
        if axis is None:
            idx = np.unravel_index(np.argmax(a.data), a.shape)
            gx[idx] = g.reshape(-1)[0]
        else:
            arg = np.argmax(a.data, axis=axis)  # first maximum on ties
            gexp = g if keepdims else np.expand_dims(g, axis)
            np.put_along_axis(gx, np.expand_dims(arg, axis), gexp, axis=axis)
        return (gx,)

    return _make_node("max", out, (a,), vjp)


def gather_rows(a, indices) -> Tensor:
    """Select rows of a 1-D or 2-D tensor (embedding lookup / row slice)."""
    a = _as_tensor(a)
    idx = np.asarray(indices, dtype=np.intp)
    if idx.ndim != 1:
        raise ShapeError(f"gather: indices must be 1-D, got shape {idx.shape}")
    if a.ndim not in (1, 2):
        raise ShapeError(f"gather: input must be 1-D or 2-D, got shape {a.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise ShapeError(f"gather: index out of range for {a.shape[0]} rows")

    def vjp(g):
        gx = np.zeros(a.shape)
        np.add.at(gx, idx, g)  # repeated indices accumulate
        return (gx,)

    return _make_node("gather", a.data[idx], (a,), vjp)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    parts = [_as_tensor(t) for t in tensors]
    if not parts:
        raise ShapeError("concat: need at least one input")
    try:
        out = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError as err:
        raise ShapeError(f"concat: {err}") from None
    sizes = [p.data.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        pieces = np.split(g, splits, axis=axis)
        return tuple(piece if p.requires_grad else None
                     for piece, p in zip(pieces, parts))

    return _make_node("concat", out, tuple(parts), vjp)


def transpose(a) -> Tensor:
    """Swap the last two axes (plain transpose for 2-D)."""
    a = _as_tensor(a)
    if a.ndim < 2:
        raise ShapeError(f"transpose: input must be at least 2-D, got shape {a.shape}")

    def vjp(g):
        return (np.swapaxes(g, -1, -2),)

    return _make_node("transpose", np.swapaxes(a.data, -1, -2), (a,), vjp)


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    shape = tuple(shape)
    if int(np.prod(shape)) != a.data.size:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}")

    def vjp(g):
        return (g.reshape(a.shape),)

    return _make_node("reshape", a.data.reshape(shape), (a,), vjp)


PRIMITIVES: dict[str, Callable] = {
    "add": add,
    "subtract": subtract,
    "multiply": multiply,
    "scale": scale,
    "matmul": matmul,
    "sigmoid": sigmoid,
    "log": log,
    "exp": exp,
    "mean": mean,
    "max": amax,
    "gather": gather_rows,
    "concat": concat,
    "transpose": transpose,
    "reshape": reshape,
}


def apply_primitive(op: str, inputs: Iterable, **kwargs) -> Tensor:
    """Dispatch a primitive by name (mainly for exhaustive testing)."""
    try:
        fn = PRIMITIVES[op]
    except KeyError:
        raise ShapeError(f"unknown primitive {op!r}") from None
    if op == "concat":
        return fn(list(inputs), **kwargs)
    return fn(*inputs, **kwargs)


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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


def backward(root: Tensor) -> None:
    """Populate ``grad`` on every requires-grad tensor reachable from ``root``.

    ``root`` must be a scalar.  Rerunning backward through tensors that a
    previous pass already visited is an error unless their gradients were
    reset first (``reset_grad`` / optimizer ``zero_grad``).
    """
    if root.data.ndim != 0 and root.data.size != 1:
        raise GraphError(f"backward: root must be scalar, got shape {root.shape}")
    if not root.requires_grad:
        raise GraphError("backward: root does not require grad")

    order = _topo_order(root)
    for node in order:
        if node._spent:
            raise GraphError(
                "backward: graph already consumed by a previous backward pass; "
                "reset gradients before reusing these tensors")
    for node in order:
        node._spent = True

    def accumulate(t: Tensor, contrib: np.ndarray) -> None:
        contrib = contrib.reshape(t.shape)
        if t.grad is None:
            t.grad = contrib  # may alias: never mutated until owned
            t._grad_owned = False
        elif t._grad_owned:
            t.grad += contrib
        else:
            t.grad = t.grad + contrib
            t._grad_owned = True

    accumulate(root, np.ones(root.shape))
    for node in reversed(order):
        if node._vjp is None:
            continue
        grads = node._vjp(node.grad.reshape(node.shape))
        for parent, g in zip(node._parents, grads):
            if g is not None and parent.requires_grad:
                accumulate(parent, g)
        if node._parents:
            node.grad = None  # free intermediate buffers early


def zero_grad(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.reset_grad()


# ---------------------------------------------------------------------------
# composites used across the package
# ---------------------------------------------------------------------------

def total(a, axis: int | None = None, keepdims: bool = False) -> Tensor:
    """Sum, composed as mean times the reduced length."""
    a = _as_tensor(a)
    n = a.data.size if axis is None else a.data.shape[axis]
    return scale(mean(a, axis=axis, keepdims=keepdims), float(n))


def log_softmax_composed(a, axis: int = -1) -> Tensor:
    """Log-softmax spelled out in listed primitives; reference for the fused op."""
    a = _as_tensor(a)
    m = amax(a, axis=axis, keepdims=True)
    shifted = subtract(a, m)
    lse = log(total(exp(shifted), axis=axis, keepdims=True))
    return subtract(shifted, lse)


def softmax_composed(a, axis: int = -1) -> Tensor:
    return exp(log_softmax_composed(a, axis=axis))


def silu_composed(a) -> Tensor:
    return multiply(a, sigmoid(a))


def layer_norm_composed(x, gain, bias, eps: float = 1e-5) -> Tensor:
    mu = mean(x, axis=-1, keepdims=True)
    centered = subtract(x, mu)
    var = mean(multiply(centered, centered), axis=-1, keepdims=True)
    inv = exp(scale(log(add(var, eps)), -0.5))
    return add(multiply(multiply(centered, inv), gain), bias)


# Fused forms of the four composites above.  They compute the same values
# (max-subtracted softmaxes, mean/variance normalization) in single nodes
# with hand-written vector-Jacobian rules, which matters for step throughput;
# the composed spellings stay available as equality and gradient oracles.

def log_softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    _check_axis("log_softmax", a, axis)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def vjp(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _make_node("log_softmax", out, (a,), vjp)


def softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    _check_axis("softmax", a, axis)
    e = np.exp(a.data - a.data.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make_node("softmax", out, (a,), vjp)


def silu(a) -> Tensor:
    """x * sigmoid(x); the package's feed-forward nonlinearity."""
    a = _as_tensor(a)
    x = a.data
    z = np.exp(-np.abs(x))
    sig = np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z))
    out = x * sig

    def vjp(g):
        return (g * (sig + out * (1.0 - sig)),)

    return _make_node("silu", out, (a,), vjp)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean and unit variance, then apply a
    learnable per-coordinate gain and bias."""
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    if x.shape[-1] != gain.shape[-1] or x.shape[-1] != bias.shape[-1]:
        raise ShapeError(
            f"layer_norm: widths disagree: {x.shape}, {gain.shape}, {bias.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = xhat * gain.data + bias.data

    def vjp(g):
        lead = tuple(range(g.ndim - 1))
        g_gain = (g * xhat).sum(axis=lead) if gain.requires_grad else None
        g_bias = g.sum(axis=lead) if bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gg = g * gain.data
            gx = inv * (gg - gg.mean(axis=-1, keepdims=True)
                        - xhat * (gg * xhat).mean(axis=-1, keepdims=True))
        return (gx, g_gain, g_bias)

    return _make_node("layer_norm", out, (x, gain, bias), vjp)


PRIMITIVES.update({
    "softmax": softmax,
    "log_softmax": log_softmax,
    "silu": silu,
    "layer_norm": layer_norm,
})


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def grad_check(f: Callable, point, h: float = 1e-5) -> float:
    """Compare analytic gradients of a scalar function against central
    finite differences.

    ``point`` is a Tensor or a sequence of Tensors; ``f`` receives fresh
    requires-grad copies positionally and must return a scalar Tensor.
    Returns the max over all coordinates of
    ``|analytic - numeric| / max(1, |analytic|)``.
    """
    pts = [point] if isinstance(point, Tensor) else list(point)
    probes = [Tensor(p.data.copy(), requires_grad=True) for p in pts]

    out = f(*probes)
    if not isinstance(out, Tensor) or out.data.size != 1:
        raise GraphError("grad_check: function must return a scalar Tensor")
    backward(out)
    analytic = [np.zeros(p.shape) if p.grad is None else p.grad.copy()
                for p in probes]

    worst = 0.0
    with no_grad():
        for k, probe in enumerate(probes):
            flat = probe.data.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                f_plus = float(f(*probes).data)
                flat[i] = orig - h
                f_minus = float(f(*probes).data)
                flat[i] = orig
                numeric = (f_plus - f_minus) / (2.0 * h)
                a = analytic[k].reshape(-1)[i]
                err = abs(a - numeric) / max(1.0, abs(a))
                if err > worst:
                    worst = err
    return worst
