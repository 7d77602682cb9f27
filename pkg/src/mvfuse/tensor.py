"""Dense float64 tensors with reverse-mode differentiation.

Only the operations needed by the projectors and the toy language model are
provided. Each op computes its forward value with numpy and, when any operand
requires a gradient, records a closure that maps the output gradient to the
operand gradients. ``backward`` walks the recorded graph once in reverse
topological order.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "no_grad",
    "grad_enabled",
    "tensor",
    "add",
    "mul",
    "scale",
    "matmul",
    "transpose",
    "reshape",
    "sum",
    "mean",
    "concat",
    "broadcast_to",
    "take",
    "inject_rows",
    "softmax",
    "layer_norm",
    "sigmoid",
    "gelu",
    "cross_entropy",
    "backward",
    "zero_grads",
    "topological_order",
]

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    """N-d float64 array with an optional gradient buffer.

    Leaves created by the user carry ``requires_grad``; interior nodes keep a
    reference to their operands and the backward rule of the op that made them.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, *, _parents=(), _backward=None, op: str = ""):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim and 0 in arr.shape:
            raise ValueError(f"tensor extents must be positive, got shape {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = _parents
        self._backward: Callable | None = _backward
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={list(self.shape)}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scale(_as_tensor(other), -1.0))

    def __rsub__(self, other):
        return add(_as_tensor(other), scale(self, -1.0))

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    @property
    def T(self):
        return swap_last(self)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def backward(self):
        backward(self)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=requires_grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward_fn, op=op)
    return Tensor(data, op=op)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: shapes {list(a.shape)} and {list(b.shape)} are not compatible") from None


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "add")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bw, "add")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "mul")

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), bw, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


def sigmoid(x: Tensor) -> Tensor:
    """Logistic function, clamped to the open interval (0, 1).

    float64 rounds sigmoid(x) to exactly 0 or 1 for |x| beyond ~37 and ~745;
    the clamp keeps outputs strictly inside the interval.
    """
    y = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    y = np.clip(y, _TINY, _ONE_MINUS)

    def bw(g):
        return (g * y * (1.0 - y),)

    return _make(y, (x,), bw, "sigmoid")


_TINY = np.nextafter(0.0, 1.0)
_ONE_MINUS = np.nextafter(1.0, 0.0)
_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))."""
    xd = x.data
    x2 = xd * xd
    t = np.tanh(_GELU_C * xd * (1.0 + 0.044715 * x2))
    y = 0.5 * xd * (1.0 + t)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * dinner),)

    return _make(y, (x,), bw, "gelu")


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: shapes {list(a.shape)} and {list(b.shape)} are not aligned")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ValueError(f"matmul: batch dims of {list(a.shape)} and {list(b.shape)} do not broadcast") from None

    if b.ndim == 2 and a.ndim > 2:
        # [..., m, k] x [k, n]: fold the batch into rows so BLAS sees one GEMM
        k, n = b.shape
        a2 = a.data.reshape(-1, k)

        def bw2(g):
            g2 = g.reshape(-1, n)
            ga = (g2 @ b.data.T).reshape(a.shape) if a.requires_grad else None
            gb = a2.T @ g2 if b.requires_grad else None
            return ga, gb

        return _make((a2 @ b.data).reshape(*a.shape[:-1], n), (a, b), bw2, "matmul")

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _make(a.data @ b.data, (a, b), bw, "matmul")


def transpose(x: Tensor, axes=None) -> Tensor:
    axes = tuple(range(x.ndim))[::-1] if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose")


def swap_last(x: Tensor) -> Tensor:
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, axes)


def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ValueError(f"reshape: cannot view {list(src)} as {list(shape)}") from None
    return _make(out, (x,), lambda g: (g.reshape(src),), "reshape")


# ---------------------------------------------------------------- reductions


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    src = x.shape
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return _make(out, (x,), bw, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    src = x.shape
    out = x.data.mean(axis=axis, keepdims=keepdims)
    n = x.data.size // max(out.size, 1)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, src).copy(),)

    return _make(out, (x,), bw, "mean")


# ---------------------------------------------------------------- structure


def broadcast_to(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    src = x.shape
    try:
        out = np.broadcast_to(x.data, shape)
    except ValueError:
        raise ValueError(f"broadcast_to: cannot broadcast {list(src)} to {list(shape)}") from None
    return _make(out, (x,), lambda g: (_unbroadcast(g, src),), "broadcast_to")


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [_as_tensor(x) for x in xs]
    try:
        out = np.concatenate([x.data for x in xs], axis=axis)
    except ValueError:
        raise ValueError(f"concat: incompatible shapes {[list(x.shape) for x in xs]}") from None
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(out, xs, bw, "concat")


def index(x: Tensor, key) -> Tensor:
    src = x.shape
    out = x.data[key]

    def bw(g):
        gx = np.zeros(src)
        np.add.at(gx, key, g)
        return (gx,)

    return _make(np.array(out, dtype=np.float64), (x,), bw, "index")


def take(table: Tensor, ids) -> Tensor:
    """Row lookup ``table[ids]`` (embedding gather)."""
    ids = np.asarray(ids, dtype=np.int64)
    n = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= n):
        raise IndexError(f"take: ids outside [0, {n})")
    src = table.shape

    def bw(g):
        gt = np.zeros(src)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, src[-1]))
        return (gt,)

    return _make(table.data[ids], (table,), bw, "take")


def inject_rows(x: Tensor, rows: Tensor, positions) -> Tensor:
    """Replace ``x[b, positions[b]]`` with ``rows[b]`` for x of shape [B, T, d]."""
    positions = np.asarray(positions, dtype=np.int64)
    B, T, d = x.shape
    if rows.shape != (B, d):
        raise ValueError(f"inject_rows: rows {list(rows.shape)} do not match x {list(x.shape)}")
    if positions.shape != (B,) or positions.min() < 0 or positions.max() >= T:
        raise IndexError(f"inject_rows: positions {positions.tolist()} out of range for length {T}")
    b = np.arange(B)
    out = x.data.copy()
    out[b, positions] = rows.data

    def bw(g):
        gx = g.copy()
        gx[b, positions] = 0.0
        return gx, g[b, positions]

    return _make(out, (x, rows), bw, "inject_rows")


# ---------------------------------------------------------------- fused ops


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    m = x.data.max(axis=axis, keepdims=True)
    if np.isneginf(m).any():
        raise ValueError("softmax: a row is fully masked (every entry is -inf)")
    e = np.exp(x.data - m)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (x,), bw, "softmax")


def _layer_norm_grad(g: np.ndarray, xhat: np.ndarray, rstd: np.ndarray) -> np.ndarray:
    """Gradient of the standardization x -> (x - mean) * rstd along the last axis."""
    return rstd * (g - g.mean(axis=-1, keepdims=True) - xhat * (g * xhat).mean(axis=-1, keepdims=True))


def layer_norm(x: Tensor, gamma: Tensor | None = None, beta: Tensor | None = None, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then ``gamma * xhat + beta``.

    Either affine parameter may be None (plain standardization).
    """
    d = x.shape[-1]
    if d < 2:
        raise ValueError(f"layer_norm: last dim must be >= 2, got shape {list(x.shape)}")
    if eps <= 0:
        raise ValueError("layer_norm: eps must be positive")
    for p in (gamma, beta):
        if p is not None and p.shape != (d,):
            raise ValueError(f"layer_norm: affine shape {list(p.shape)} does not match last dim of {list(x.shape)}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    y = xhat
    if gamma is not None:
        y = y * gamma.data
    if beta is not None:
        y = y + beta.data
    lead = tuple(range(x.ndim - 1))

    def bw(g):
        gxhat = g * gamma.data if gamma is not None else g
        gx = _layer_norm_grad(gxhat, xhat, rstd)
        gg = (g * xhat).sum(axis=lead) if gamma is not None else None
        gb = g.sum(axis=lead) if beta is not None else None
        return gx, gg, gb

    parents = [x, gamma if gamma is not None else Tensor(0.0), beta if beta is not None else Tensor(0.0)]
    return _make(y, parents, bw, "layer_norm")


def standardize(x: Tensor, floor: float = 1e-12) -> Tensor:
    """(x - mean) / std along the last axis with no epsilon inside the root.

    The output has exactly zero mean and unit variance up to rounding. Rows
    whose std falls below ``floor`` are divided by ``floor`` instead.
    """
    d = x.shape[-1]
    if d < 2:
        raise ValueError(f"standardize: last dim must be >= 2, got shape {list(x.shape)}")
    xc = x.data - x.data.mean(axis=-1, keepdims=True)
    std = np.sqrt((xc * xc).mean(axis=-1, keepdims=True))
    floored = std < floor
    rstd = 1.0 / np.where(floored, floor, std)
    xhat = xc * rstd

    def bw(g):
        gx = _layer_norm_grad(g, np.where(floored, 0.0, xhat), rstd)
        return (gx,)

    return _make(xhat, (x,), bw, "standardize")


def cross_entropy(logits: Tensor, targets, mask=None) -> Tensor:
    """Mean negative log-softmax of ``targets`` over unmasked rows of [n, V] logits."""
    if logits.ndim != 2:
        raise ValueError(f"cross_entropy: logits must be [n, V], got {list(logits.shape)}")
    n, V = logits.shape
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    mask = np.ones(n, dtype=bool) if mask is None else np.asarray(mask, dtype=bool).reshape(-1)
    if targets.shape != (n,) or mask.shape != (n,):
        raise ValueError(f"cross_entropy: expected {n} targets and mask entries")
    count = int(mask.sum())
    if count == 0:
        raise ValueError("cross_entropy: every position is masked")
    sel = targets[mask]
    if sel.min() < 0 or sel.max() >= V:
        raise IndexError(f"cross_entropy: target outside [0, {V})")
    z = logits.data
    m = z.max(axis=1, keepdims=True)
    e = np.exp(z - m)
    s = e.sum(axis=1, keepdims=True)
    lse = (m + np.log(s))[:, 0]
    safe_t = np.where(mask, targets, 0)
    picked = z[np.arange(n), safe_t]
    loss = ((lse - picked) * mask).sum() / count

    def bw(g):
        p = e / s
        p[np.arange(n), safe_t] -= 1.0
        p *= (mask / count)[:, None]
        return (p * g,)

    return _make(np.asarray(loss), (logits,), bw, "cross_entropy")


# ---------------------------------------------------------------- graph


def topological_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` that need gradients, operands first."""
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


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every requires_grad leaf.

    Gradients add onto existing buffers; call :func:`zero_grads` between steps.
    """
    if loss.data.size != 1 or loss.ndim > 1:
        raise ValueError(f"backward: loss must be a scalar, got shape {list(loss.shape)}")
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
    for node in reversed(topological_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for p, pg in zip(node._parents, node._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            if id(p) in grads:
                grads[id(p)] = grads[id(p)] + pg
            else:
                grads[id(p)] = pg


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
