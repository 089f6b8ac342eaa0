"""Dense tensors over numpy buffers with an eager reverse-mode tape.

Every differentiable primitive computes its forward value immediately and, when a
:class:`Tape` is active and one of its inputs requires a gradient, records a node
holding a closure that maps the output gradient to input gradients.
:func:`backward` replays those nodes in reverse recording order, which is a valid
reverse topological order because the tape is built eagerly.

Broadcasting is deliberately narrow: ``a + b`` accepts identical shapes, a Python
scalar, or a ``b`` whose shape equals the trailing dimensions of ``a`` (bias and
positional-table adds). Everything else is a :class:`DimensionError`.
"""

from __future__ import annotations

import math
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import (
    ContractError,
    DimensionError,
    DomainError,
    DTypeError,
    PropagationError,
    UndefinedSimilarityError,
)

DTYPES = {"f32": np.float32, "f64": np.float64}
_NAMES = {np.dtype(np.float32): "f32", np.dtype(np.float64): "f64"}


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is not None:
            arr = np.asarray(data, dtype=DTYPES[dtype])
        else:
            arr = np.asarray(data)
            if arr.dtype not in _NAMES:
                arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None

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
    def dtype(self) -> str:
        return _NAMES[self.data.dtype]

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def to(self, dtype: str) -> "Tensor":
        """Explicit dtype conversion; differentiable."""
        src = self.data.dtype
        return _record(self.data.astype(DTYPES[dtype]), (self,), lambda g: (g.astype(src),))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise DimensionError("tensor / tensor is not supported; divide by a scalar")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return tmean(self, axis)


def as_tensor(x, dtype: str | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


# ---------------------------------------------------------------------------
# tape


class _Node:
    __slots__ = ("out", "inputs", "fn")

    def __init__(self, out: Tensor, inputs: tuple[Tensor, ...], fn: Callable):
        self.out = out
        self.inputs = inputs
        self.fn = fn


_local = threading.local()


def _stack() -> list:
    stack = getattr(_local, "tapes", None)
    if stack is None:
        stack = _local.tapes = []
    return stack


class Tape:
    """Ordered record of primitive operations.

    Use as a context manager; primitives evaluated inside the block record onto
    the innermost active tape. A tape belongs to the thread that opened it.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _stack().remove(self)

    def __len__(self) -> int:
        return len(self.nodes)


def active_tape() -> Tape | None:
    stack = _stack()
    return stack[-1] if stack else None


def _record(data: np.ndarray, inputs: tuple[Tensor, ...], fn: Callable) -> Tensor:
    out = Tensor(data)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.nodes.append(_Node(out, inputs, fn))
    return out


class Gradients:
    """Gradient map keyed by tensor identity."""

    def __init__(self):
        self._grads: dict[int, np.ndarray] = {}
        self._owners: dict[int, Tensor] = {}

    def __getitem__(self, t: Tensor) -> np.ndarray:
        return self._grads[id(t)]

    def get(self, t: Tensor, default=None):
        return self._grads.get(id(t), default)

    def __contains__(self, t: Tensor) -> bool:
        return id(t) in self._grads

    def __len__(self) -> int:
        return len(self._grads)

    def tensors(self) -> list[Tensor]:
        return list(self._owners.values())


def backward(tape: Tape, loss: Tensor) -> Gradients:
    """Reverse sweep from a scalar ``loss``; fills ``.grad`` on reachable leaves.

    Returns the gradient of every leaf tensor (one that requires a gradient but
    was not produced on the tape) reachable from ``loss``.
    """
    if loss.data.ndim != 0:
        raise ContractError(f"loss must be a scalar tensor, got shape {loss.shape}")
    produced = {id(node.out) for node in tape.nodes}
    if id(loss) not in produced:
        raise ContractError("loss was not produced on this tape")
    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    owners: dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        g = pending.pop(id(node.out), None)
        if g is None:
            continue
        grads = node.fn(g)
        for inp, ig in zip(node.inputs, grads):
            if ig is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in pending:
                pending[key] = pending[key] + ig
            else:
                pending[key] = ig
                owners[key] = inp
    result = Gradients()
    for key, g in pending.items():
        if key in produced:
            continue
        t = owners[key]
        t.grad = g
        result._grads[key] = g
        result._owners[key] = t
    return result


# ---------------------------------------------------------------------------
# primitives


def _check_dtype(a: Tensor, b: Tensor) -> None:
    if a.data.dtype != b.data.dtype:
        raise DTypeError(f"dtype mismatch: {a.dtype} vs {b.dtype}")


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead)))


def _broadcast_ok(a: Tensor, b: Tensor) -> bool:
    if a.shape == b.shape:
        return True
    return 0 < b.ndim < a.ndim and a.shape[a.ndim - b.ndim:] == b.shape


def add(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        c = float(b)
        return _record(a.data + a.data.dtype.type(c), (a,), lambda g: (g,))
    _check_dtype(a, b)
    if not _broadcast_ok(a, b):
        if _broadcast_ok(b, a):
            a, b = b, a
        else:
            raise DimensionError(f"cannot add shapes {a.shape} and {b.shape}")
    bshape = b.shape
    return _record(a.data + b.data, (a, b), lambda g: (g, _reduce_to(g, bshape)))


def sub(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        return add(a, -float(b))
    _check_dtype(a, b)
    if not _broadcast_ok(a, b):
        raise DimensionError(f"cannot subtract shapes {a.shape} and {b.shape}")
    bshape = b.shape
    return _record(a.data - b.data, (a, b), lambda g: (g, -_reduce_to(g, bshape)))


def neg(a: Tensor) -> Tensor:
    return _record(-a.data, (a,), lambda g: (-g,))


def mul(a: Tensor, b) -> Tensor:
    """Elementwise product of equal shapes, or scaling by a Python scalar."""
    if not isinstance(b, Tensor):
        c = a.data.dtype.type(float(b))
        return _record(a.data * c, (a,), lambda g: (g * c,))
    _check_dtype(a, b)
    if a.shape != b.shape:
        raise DimensionError(f"cannot multiply shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    return _record(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale_rows(a: Tensor, factors) -> Tensor:
    """Multiply ``a[i]`` by ``factors[i]`` along the leading axis (constant factors)."""
    f = np.asarray(factors, dtype=a.data.dtype)
    if f.shape != (a.shape[0],):
        raise DimensionError(f"need {a.shape[0]} row factors, got shape {f.shape}")
    f = f.reshape((-1,) + (1,) * (a.ndim - 1))
    return _record(a.data * f, (a,), lambda g: (g * f,))


def _swap(x: np.ndarray) -> np.ndarray:
    return np.swapaxes(x, -1, -2)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    ``b`` is either a matrix shared across all leading axes of ``a`` or a stack
    with exactly the same leading axes.
    """
    _check_dtype(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    if b.ndim != 2 and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul batch mismatch: {a.shape} x {b.shape}")
    ad, bd = a.data, b.data
    shared = b.ndim == 2

    def fn(g):
        ga = g @ _swap(bd) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            if shared:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _swap(ad) @ g
        return ga, gb

    return _record(ad @ bd, (a, b), fn)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape
    return _record(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),))


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if not axes:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _record(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def take(a: Tensor, index) -> Tensor:
    """Basic (slice/int) indexing."""
    src_shape, dt = a.shape, a.data.dtype

    def fn(g):
        full = np.zeros(src_shape, dtype=dt)
        full[index] = g
        return (full,)

    return _record(a.data[index], (a,), fn)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise DimensionError("concat of an empty list")
    for t in tensors[1:]:
        _check_dtype(tensors[0], t)
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat shape mismatch: {[t.shape for t in tensors]}") from exc
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def fn(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _record(data, tuple(tensors), fn)


def stack_mean(tensors: Sequence[Tensor]) -> Tensor:
    """Entry-wise mean of equal-shape tensors, reduced in declaration order."""
    tensors = list(tensors)
    if not tensors:
        raise DimensionError("mean of an empty list")
    for t in tensors[1:]:
        _check_dtype(tensors[0], t)
        if t.shape != tensors[0].shape:
            raise DimensionError(f"mean shape mismatch: {[t.shape for t in tensors]}")
    k = len(tensors)
    if k == 1:
        return tensors[0]
    acc = tensors[0].data.copy()
    for t in tensors[1:]:
        acc += t.data
    inv = acc.dtype.type(1.0 / k)
    return _record(acc * inv, tuple(tensors), lambda g: tuple(g * inv for _ in range(k)))


def tile_rows(a: Tensor, count: int) -> Tensor:
    """(B, d) -> (B, count, d) by repetition."""
    if a.ndim != 2:
        raise DimensionError(f"tile_rows expects a matrix, got {a.shape}")
    data = np.repeat(a.data[:, None, :], count, axis=1)
    return _record(data, (a,), lambda g: (g.sum(axis=1),))


def tsum(a: Tensor, axis=None) -> Tensor:
    src, dt = a.shape, a.data.dtype

    def fn(g):
        if axis is None:
            return (np.full(src, g, dtype=dt),)
        return (np.broadcast_to(np.expand_dims(g, axis), src).copy(),)

    return _record(np.asarray(a.data.sum(axis=axis)), (a,), fn)


def tmean(a: Tensor, axis=None) -> Tensor:
    count = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return mul(tsum(a, axis), 1.0 / count)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _record(out, (a,), lambda g: (g * out,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _record(out, (a,), lambda g: (g * (1.0 - out * out),))


def square(a: Tensor) -> Tensor:
    ad = a.data
    return _record(ad * ad, (a,), lambda g: (2.0 * g * ad,))


def silu(a: Tensor) -> Tensor:
    x = a.data
    sig = 1.0 / (1.0 + np.exp(-x))
    return _record(x * sig, (a,), lambda g: (g * (sig * (1.0 + x * (1.0 - sig))),))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    x = a.data
    c = x.dtype.type(_GELU_C)
    inner = c * (x + 0.044715 * x**3)
    th = np.tanh(inner)
    out = 0.5 * x * (1.0 + th)

    def fn(g):
        dinner = c * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * dinner),)

    return _record(out, (a,), fn)


def softmax_rows(a: Tensor) -> Tensor:
    """Softmax over the last axis, stabilised by subtracting the row max."""
    x = a.data
    if np.isnan(x).any():
        raise PropagationError("softmax_rows received NaN input")
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    y = e / e.sum(axis=-1, keepdims=True)

    def fn(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _record(y, (a,), fn)


def layer_norm(a: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis to zero mean and unit variance (no affine)."""
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    n = x.shape[-1]

    def fn(g):
        gs = g.sum(axis=-1, keepdims=True)
        gx = (g * xhat).sum(axis=-1, keepdims=True)
        return (inv * (g - gs / n - xhat * gx / n),)

    return _record(xhat, (a,), fn)


def mse(pred: Tensor, target: Tensor) -> Tensor:
    _check_dtype(pred, target)
    if pred.shape != target.shape:
        raise DimensionError(f"mse shape mismatch: {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    scale = 2.0 / diff.size

    def fn(g):
        gd = g * scale * diff
        return gd, -gd

    return _record(np.asarray((diff * diff).mean()), (pred, target), fn)


def frobenius_norm(t: Tensor) -> Tensor:
    """Square root of the sum of squared entries (differentiable)."""
    t = as_tensor(t)
    if t.size == 0:
        raise DomainError("frobenius_norm of an empty tensor")
    x = t.data
    n = np.sqrt((x * x).sum())

    def fn(g):
        if n == 0:
            return (np.zeros_like(x),)
        return (g * x / n,)

    return _record(np.asarray(n), (t,), fn)


def cosine_similarity(u, v) -> float:
    """dot(u, v) / (|u| |v|) over flattened inputs."""
    a = np.ravel(u.data if isinstance(u, Tensor) else np.asarray(u, dtype=np.float64))
    b = np.ravel(v.data if isinstance(v, Tensor) else np.asarray(v, dtype=np.float64))
    if a.size != b.size:
        raise DimensionError(f"cosine_similarity length mismatch: {a.size} vs {b.size}")
    a = a.astype(np.float64)
    b = b.astype(np.float64)
    na, nb = np.sqrt(a @ a), np.sqrt(b @ b)
    if na == 0 or nb == 0:
        raise UndefinedSimilarityError("cosine similarity undefined for a zero vector")
    return float(np.clip((a @ b) / (na * nb), -1.0, 1.0))


# ---------------------------------------------------------------------------
# verification


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5) -> float:
    """Max relative error between taped and central-difference gradients.

    ``f`` maps ``x`` to a scalar tensor; it may close over ``x`` instead of using
    its argument, since ``x.data`` is perturbed in place (and restored).
    The error per coordinate is ``|analytic - numeric| / max(1, |analytic|)``.
    """
    if x.dtype != "f64":
        raise DTypeError("grad_check requires an f64 tensor")
    saved = x.requires_grad
    x.requires_grad = True
    try:
        with Tape() as tape:
            y = f(x)
        analytic = backward(tape, y).get(x)
    finally:
        x.requires_grad = saved
    if analytic is None:
        analytic = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    ga = analytic.reshape(-1)
    worst = 0.0
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(f(x).data)
        flat[i] = orig - eps
        fm = float(f(x).data)
        flat[i] = orig
        numeric = (fp - fm) / (2 * eps)
        err = abs(ga[i] - numeric) / max(1.0, abs(ga[i]))
        worst = max(worst, err)
    return worst


def parameters_checksum(tensors: Iterable[Tensor]) -> str:
    import hashlib

    h = hashlib.sha256()
    for t in tensors:
        h.update(np.ascontiguousarray(t.data).tobytes())
    return h.hexdigest()
