"""Dense tensors with reverse-mode automatic differentiation.

Tensors wrap a numpy array and record the operation that produced them.
``backward`` walks the recorded graph from a scalar loss and returns a
:class:`GradTape` mapping each requested parameter to its gradient.  Nodes
are never mutated by backward, so a graph can be differentiated repeatedly.

Storage is float32 by default; ``precision("float64")`` switches every
tensor created inside the block to double precision for verification runs.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import InvalidArgument

_state = threading.local()


def compute_dtype() -> np.dtype:
    return getattr(_state, "dtype", np.dtype(np.float32))


@contextlib.contextmanager
def precision(name: str):
    """Temporarily set the compute dtype ("float32" or "float64")."""
    if name not in ("float32", "float64"):
        raise InvalidArgument(f"unknown precision {name!r}")
    prev = compute_dtype()
    _state.dtype = np.dtype(name)
    try:
        yield
    finally:
        _state.dtype = prev


def _as_array(x) -> np.ndarray:
    return np.asarray(x, dtype=compute_dtype())


class Tensor:
    __slots__ = ("data", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = _as_array(data)
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        tag = f" {self.name}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, dtype={self.data.dtype})"

    # operator sugar
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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    @property
    def T(self):
        return swap_last(self)


def tensor(x, requires_grad: bool = False) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, requires_grad=requires_grad)


def _make(data: np.ndarray, parents: tuple, backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.name = None
    live = tuple(p for p in parents if p.requires_grad)
    out.requires_grad = bool(live)
    if out.requires_grad:
        out._parents = parents
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


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


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    return _make(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    return _make(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    out = a.data / b.data
    return _make(
        out,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * out / b.data, b.shape),
        ),
    )


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,))


def sin(x: Tensor) -> Tensor:
    return _make(np.sin(x.data), (x,), lambda g: (g * np.cos(x.data),))


def square(x: Tensor) -> Tensor:
    return _make(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _make(out, (x,), lambda g: (g * (1.0 - out * out),))


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; gradient flows only where the input is inside."""
    inside = (x.data >= lo) & (x.data <= hi)
    return _make(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,))


_GELU_C = float(np.sqrt(2.0 / np.pi))


def gelu(x: Tensor) -> Tensor:
    """tanh-approximated GELU; smooth everywhere, so finite differences agree."""
    xd = x.data
    inner = _GELU_C * (xd + 0.044715 * xd * xd * xd)
    t = np.tanh(inner)
    out = 0.5 * xd * (1.0 + t)

    def back(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * xd * xd)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * dinner),)

    return _make(out.astype(xd.dtype, copy=False), (x,), back)


# ------------------------------------------------------------------ reductions


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.sum(x.data, axis=axis, keepdims=keepdims, dtype=np.float64).astype(x.data.dtype)
    out = np.asarray(out)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(out, (x,), back)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = x.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([x.shape[a] for a in axes]))
    return mul(tsum(x, axis, keepdims), 1.0 / count)


# -------------------------------------------------------------------- shaping


def reshape(x: Tensor, shape) -> Tensor:
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def swap_last(x: Tensor) -> Tensor:
    return _make(np.swapaxes(x.data, -1, -2), (x,), lambda g: (np.swapaxes(g, -1, -2),))


def getitem(x: Tensor, index) -> Tensor:
    """Basic (slice/int) indexing only."""

    def back(g):
        full = np.zeros_like(x.data)
        full[index] += g
        return (full,)

    return _make(x.data[index], (x,), back)


def take_rows(table: Tensor, ids: np.ndarray) -> Tensor:
    """Embedding lookup: ``table[ids]`` with scatter-add backward."""
    ids = np.asarray(ids)

    def back(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[-1]))
        return (full,)

    return _make(table.data[ids], (table,), back)


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [tensor(x) for x in xs]
    sizes = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return _make(
        np.concatenate([x.data for x in xs], axis=axis),
        tuple(xs),
        lambda g: tuple(np.split(g, sizes, axis=axis)),
    )


# --------------------------------------------------------------------- linalg


def matmul(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise InvalidArgument(f"matmul shape mismatch {a.shape} @ {b.shape}")

    def back(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(a.data @ b.data, (a, b), back)


# ------------------------------------------------------------ fused numerics


def softmax_lastdim(x) -> Tensor:
    """Row softmax over the last axis with per-row max subtraction."""
    x = tensor(x)
    if x.data.size == 0 or x.ndim == 0:
        raise InvalidArgument("softmax of an empty tensor")
    shifted = x.data - np.max(x.data, axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / np.sum(e, axis=-1, keepdims=True, dtype=np.float64).astype(e.dtype)

    def back(g):
        dot = np.sum(g * out, axis=-1, keepdims=True, dtype=np.float64).astype(out.dtype)
        return (out * (g - dot),)

    return _make(out, (x,), back)


def log_softmax_lastdim(x: Tensor) -> Tensor:
    shifted = x.data - np.max(x.data, axis=-1, keepdims=True)
    lse = np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True, dtype=np.float64))
    out = (shifted - lse).astype(x.data.dtype)

    def back(g):
        p = np.exp(out)
        return (g - p * np.sum(g, axis=-1, keepdims=True),)

    return _make(out, (x,), back)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    dt = x.data.dtype
    mu = np.mean(x.data, axis=-1, keepdims=True, dtype=np.float64).astype(dt)
    xc = x.data - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True, dtype=np.float64).astype(dt)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def back(g):
        gx_hat = g * gain.data
        n = x.shape[-1]
        gx = inv / n * (
            n * gx_hat
            - np.sum(gx_hat, axis=-1, keepdims=True)
            - xhat * np.sum(gx_hat * xhat, axis=-1, keepdims=True)
        )
        return (
            gx,
            _unbroadcast(g * xhat, gain.shape),
            _unbroadcast(g, bias.shape),
        )

    return _make(out.astype(dt, copy=False), (x, gain, bias), back)


def l2_normalize(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Scale each row of the last axis to unit Euclidean norm."""
    norm = np.sqrt(np.sum(x.data * x.data, axis=-1, keepdims=True, dtype=np.float64) + eps)
    norm = norm.astype(x.data.dtype)
    out = x.data / norm

    def back(g):
        return ((g - out * np.sum(g * out, axis=-1, keepdims=True)) / norm,)

    return _make(out, (x,), back)


def scaled_attention(q, k, v, mask: np.ndarray | None = None) -> Tensor:
    """softmax(q kᵀ / sqrt(d) + mask) v over the last two axes.

    ``mask`` is additive (0 or -inf) and broadcast against the score matrix.
    """
    q, k, v = tensor(q), tensor(k), tensor(v)
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise InvalidArgument(f"attention shape mismatch q{q.shape} k{k.shape} v{v.shape}")
    if k.shape[-2] < 1:
        raise InvalidArgument("attention needs at least one key")
    scores = matmul(q, swap_last(k)) * (1.0 / np.sqrt(q.shape[-1]))
    if mask is not None:
        scores = add(scores, Tensor(mask))
    return matmul(softmax_lastdim(scores), v)


# ----------------------------------------------------------------- gradients


class GradTape(Mapping):
    """Gradients keyed by parameter name (or the tensor itself when unnamed)."""

    def __init__(self, grads: dict):
        self._grads = grads

    def __getitem__(self, key):
        return self._grads[key]

    def __iter__(self):
        return iter(self._grads)

    def __len__(self):
        return len(self._grads)


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


def backward(loss: Tensor, params: Mapping[str, Tensor] | Iterable[Tensor]) -> GradTape:
    """Reverse-mode gradients of a scalar ``loss`` w.r.t. ``params``.

    Parameters that the loss does not depend on receive zero gradients.
    """
    if loss.data.size != 1:
        raise InvalidArgument(f"backward needs a scalar loss, got shape {loss.shape}")
    if isinstance(params, Mapping):
        named = list(params.items())
    else:
        named = [(p, p) for p in params]

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    if loss.requires_grad:
        for node in reversed(_topo_order(loss)):
            g = grads.pop(id(node), None) if node._backward is not None else grads.get(id(node))
            if g is None or node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                pid = id(parent)
                if pid in grads:
                    grads[pid] = grads[pid] + pg
                else:
                    grads[pid] = pg
    out = {}
    for key, p in named:
        g = grads.get(id(p))
        out[key] = np.zeros_like(p.data) if g is None else np.asarray(g, dtype=p.data.dtype).reshape(p.shape)
    return GradTape(out)


def finite_diff_grad(
    f: Callable[[dict[str, np.ndarray]], float],
    theta: Mapping[str, np.ndarray],
    eps: float = 1e-3,
    coords: Mapping[str, Sequence[int]] | None = None,
) -> dict[str, np.ndarray]:
    """Central-difference gradient of ``f`` at ``theta``.

    ``coords`` optionally restricts which flat indices are probed per
    tensor; unprobed entries are left as NaN so they cannot be mistaken for
    a measured zero.
    """
    if eps <= 0:
        raise InvalidArgument("eps must be positive")
    base = {k: np.array(v, copy=True) for k, v in theta.items()}
    grads: dict[str, np.ndarray] = {}
    for name, arr in base.items():
        flat = arr.reshape(-1)
        g = np.full(flat.shape, np.nan if coords is not None else 0.0, dtype=np.float64)
        idxs = range(flat.size) if coords is None else coords.get(name, ())
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + eps
            hi = float(f(base))
            flat[i] = orig - eps
            lo = float(f(base))
            flat[i] = orig
            g[i] = (hi - lo) / (2.0 * eps)
        grads[name] = g.reshape(arr.shape)
    return grads
