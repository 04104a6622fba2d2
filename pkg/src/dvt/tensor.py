"""Minimal float64 tensor with reverse-mode autodiff.

Every op is a plain function that returns a new :class:`Tensor`. When gradient
recording is on and any operand participates, the result remembers its
operands and a closure mapping the upstream gradient to operand gradients.
:func:`backward` orders the recorded graph topologically (the tape) and
replays it once in reverse.

Only leaf tensors keep ``.grad`` after a backward pass, and each pass
overwrites it instead of accumulating into the previous value.
"""

from __future__ import annotations

import contextlib
import functools
import math
from typing import Callable, Iterator, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "NonFiniteError",
    "ShapeError",
    "no_grad",
    "is_grad_enabled",
    "count_matmul_flops",
    "tensor",
    "add",
    "sub",
    "mul",
    "neg",
    "scale",
    "matmul",
    "linear",
    "reshape",
    "transpose",
    "broadcast_to",
    "concat",
    "split",
    "index",
    "tensor_sum",
    "mean",
    "softmax",
    "layer_norm",
    "gelu",
    "cross_entropy",
    "bilinear_matrix",
    "bilinear_upsample_grid",
    "backward",
    "tape",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf."""


_GRAD_ENABLED = True
_FLOP_COUNTERS: list["_FlopCounter"] = []

GradFn = Callable[[np.ndarray], Sequence[np.ndarray | None]]


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class _FlopCounter:
    def __init__(self) -> None:
        self.total = 0

    def add(self, flops: int) -> None:
        self.total += int(flops)


@contextlib.contextmanager
def count_matmul_flops() -> Iterator[_FlopCounter]:
    """Tally 2*m*k*n FLOPs for every matmul/linear executed in the block."""
    counter = _FlopCounter()
    _FLOP_COUNTERS.append(counter)
    try:
        yield counter
    finally:
        _FLOP_COUNTERS.remove(counter)


def _record_flops(flops: int) -> None:
    for counter in _FLOP_COUNTERS:
        counter.add(flops)


class Tensor:
    """Dense float64 array that can take part in gradient recording."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_grad_fn", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if not np.isfinite(arr).all():
            raise NonFiniteError(f"non-finite values in tensor {name or ''}".strip())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._grad_fn: GradFn | None = None
        self.name = name

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
        return self._grad_fn is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return _wrap(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims: bool = False):
        return tensor_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def _wrap(arr: np.ndarray) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = arr
    out.requires_grad = False
    out.grad = None
    out._parents = ()
    out._grad_fn = None
    out.name = None
    return out


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _make(arr: np.ndarray, parents: Sequence[Tensor], grad_fn: GradFn, op: str) -> Tensor:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{op} produced non-finite values")
    out = _wrap(arr)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._grad_fn = grad_fn
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
    return grad.reshape(shape)


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise ShapeError(f"add: cannot broadcast {a.shape} and {b.shape}") from exc
    sa, sb = a.shape, b.shape
    return _make(out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data - b.data
    except ValueError as exc:
        raise ShapeError(f"sub: cannot broadcast {a.shape} and {b.shape}") from exc
    sa, sb = a.shape, b.shape
    return _make(out, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError as exc:
        raise ShapeError(f"mul: cannot broadcast {a.shape} and {b.shape}") from exc
    ad, bd = a.data, b.data
    return _make(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
        "mul",
    )


def neg(x: Tensor) -> Tensor:
    return _make(-x.data, (x,), lambda g: (-g,), "neg")


def scale(x: Tensor, factor: float) -> Tensor:
    factor = float(factor)
    return _make(x.data * factor, (x,), lambda g: (g * factor,), "scale")


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    c = math.sqrt(2.0 / math.pi)
    xd = x.data
    x2 = xd * xd
    t = np.tanh(c * xd * (1.0 + 0.044715 * x2))
    out = 0.5 * xd * (1.0 + t)

    def grad_fn(g):
        dinner = c * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * dinner),)

    return _make(out, (x,), grad_fn, "gelu")


# --------------------------------------------------------------------- linear


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes (leading axes broadcast)."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(f"matmul batch dims differ: {a.shape} @ {b.shape}") from exc
    if _FLOP_COUNTERS:
        _record_flops(2 * out.size * a.shape[-1])
    ad, bd = a.data, b.data

    def grad_fn(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2)) if a.requires_grad else None
        gb = np.matmul(np.swapaxes(ad, -1, -2), g) if b.requires_grad else None
        return (
            None if ga is None else _unbroadcast(ga, ad.shape),
            None if gb is None else _unbroadcast(gb, bd.shape),
        )

    return _make(out, (a, b), grad_fn, "matmul")


# Rows go through gemm in fixed-size blocks so that a row's result never
# depends on how many other rows share the call (BLAS picks different kernels
# for small matrices). This keeps every sample's output bitwise independent of
# batch size and composition.
_ROW_BLOCK = 128


def _blocked_rows_matmul(flat: np.ndarray, w: np.ndarray) -> np.ndarray:
    m = flat.shape[0]
    pad = (-m) % _ROW_BLOCK
    if pad:
        flat = np.concatenate([flat, np.zeros((pad, flat.shape[1]))])
    out = np.empty((flat.shape[0], w.shape[1]))
    for start in range(0, flat.shape[0], _ROW_BLOCK):
        np.matmul(flat[start : start + _ROW_BLOCK], w, out=out[start : start + _ROW_BLOCK])
    return out[:m]


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` with ``weight`` laid out [in, out]."""
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"linear: input {x.shape} does not fit weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[1],):
        raise ShapeError(f"linear: bias {bias.shape} does not fit weight {weight.shape}")
    xd, wd = x.data, weight.data
    flat = xd.reshape(-1, wd.shape[0])
    out = _blocked_rows_matmul(flat, wd)
    if bias is not None:
        out += bias.data
    if _FLOP_COUNTERS:
        _record_flops(2 * flat.shape[0] * wd.shape[0] * wd.shape[1])
    out = out.reshape(xd.shape[:-1] + (wd.shape[1],))
    parents = (x, weight) if bias is None else (x, weight, bias)

    def grad_fn(g):
        g2 = g.reshape(-1, wd.shape[1])
        gx = (g2 @ wd.T).reshape(xd.shape) if x.requires_grad else None
        gw = flat.T @ g2 if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return _make(out, parents, grad_fn, "linear")


# ----------------------------------------------------------------- structural


def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {src} into {shape}") from exc
    return _make(out, (x,), lambda g: (g.reshape(src),), "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"bad permutation {axes} for {x.ndim}-d tensor")
    inv = tuple(np.argsort(axes))
    return _make(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),), "transpose")


def broadcast_to(x: Tensor, shape) -> Tensor:
    src = x.shape
    try:
        out = np.broadcast_to(x.data, shape).copy()
    except ValueError as exc:
        raise ShapeError(f"cannot broadcast {src} to {shape}") from exc
    return _make(out, (x,), lambda g: (_unbroadcast(g, src),), "broadcast_to")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat of an empty list")
    ndim = tensors[0].ndim
    ax = axis % ndim
    for t in tensors[1:]:
        if t.ndim != ndim or any(
            t.shape[i] != tensors[0].shape[i] for i in range(ndim) if i != ax
        ):
            raise ShapeError(
                f"concat on axis {axis}: shapes {[t.shape for t in tensors]} disagree"
            )
    out = np.concatenate([t.data for t in tensors], axis=ax)
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]
    return _make(out, tensors, lambda g: tuple(np.split(g, bounds, axis=ax)), "concat")


def split(x: Tensor, sizes: Sequence[int], axis: int = -1) -> list[Tensor]:
    """Inverse of :func:`concat`: cut ``x`` into pieces of the given extents."""
    ax = axis % x.ndim
    if sum(sizes) != x.shape[ax]:
        raise ShapeError(f"split sizes {list(sizes)} do not cover axis of {x.shape[ax]}")
    pieces = []
    start = 0
    for n in sizes:
        sl = [slice(None)] * x.ndim
        sl[ax] = slice(start, start + n)
        pieces.append(index(x, tuple(sl)))
        start += n
    return pieces


def index(x: Tensor, idx) -> Tensor:
    """Basic (slice/int) indexing."""
    out = x.data[idx]
    if isinstance(out, np.ndarray) and np.shares_memory(out, x.data):
        out = out.copy()
    else:
        out = np.asarray(out, dtype=np.float64)
    src = x.shape

    def grad_fn(g):
        full = np.zeros(src)
        full[idx] += g
        return (full,)

    return _make(out, (x,), grad_fn, "index")


def tensor_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    src = x.shape
    out = np.asarray(x.data.sum(axis=axis, keepdims=keepdims))

    def grad_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return _make(out, (x,), grad_fn, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([x.shape[a] for a in axes]))
    return scale(tensor_sum(x, axis, keepdims), 1.0 / count)


# ------------------------------------------------------------ normalisation


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"softmax axis {axis} invalid for {x.ndim}-d tensor")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    return _make(
        y, (x,), lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),), "softmax"
    )


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalise the last axis to zero mean / unit variance, then scale and shift."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: gain {gain.shape}/bias {bias.shape} vs width {d}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    centred = xd - mu
    var = (centred * centred).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = centred * rstd
    gd = gain.data
    out = xhat * gd + bias.data

    def grad_fn(g):
        lead = tuple(range(g.ndim - 1))
        ggain = (g * xhat).sum(axis=lead) if gain.requires_grad else None
        gbias = g.sum(axis=lead) if bias.requires_grad else None
        gx = None
        if x.requires_grad:
            dxhat = g * gd
            gx = rstd * (
                dxhat
                - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
            )
        return gx, ggain, gbias

    return _make(out, (x, gain, bias), grad_fn, "layer_norm")


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean over the batch of ``-log softmax(logits)[label]``."""
    labels = np.asarray(labels)
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects [B, C] logits, got {logits.shape}")
    b, c = logits.shape
    if labels.shape != (b,):
        raise ShapeError(f"cross_entropy: {labels.shape[0] if labels.ndim else 0} labels for {b} rows")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"label out of range [0, {c})")
    labels = labels.astype(np.int64)
    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    lse = zmax[:, 0] + np.log(np.exp(z - zmax).sum(axis=1))
    rows = np.arange(b)
    loss = np.asarray((lse - z[rows, labels]).mean())

    def grad_fn(g):
        p = np.exp(z - lse[:, None])
        p[rows, labels] -= 1.0
        return (p * (g / b),)

    return _make(loss, (logits,), grad_fn, "cross_entropy")


# ------------------------------------------------------------------ resampling


@functools.lru_cache(maxsize=256)
def _bilinear_matrix_cached(n_in: int, n_out: int) -> np.ndarray:
    m = np.zeros((n_out, n_in))
    if n_in == 1:
        m[:, 0] = 1.0
        return m
    for i in range(n_out):
        pos = i * (n_in - 1) / (n_out - 1)
        lo = min(int(math.floor(pos)), n_in - 2)
        frac = pos - lo
        m[i, lo] += 1.0 - frac
        m[i, lo + 1] += frac
    m.setflags(write=False)
    return m


def bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    """1-D corner-aligned linear interpolation weights, shape [n_out, n_in]."""
    if n_out < n_in:
        raise ValueError(f"downsampling {n_in} -> {n_out} is not supported")
    return _bilinear_matrix_cached(int(n_in), int(n_out))


def bilinear_upsample_grid(x: Tensor, target: tuple[int, int]) -> Tensor:
    """Bilinearly resize a [..., H, W, C] grid to [..., H', W', C].

    Corner-aligned: source coordinates 0 and H-1 land exactly on target
    coordinates 0 and H'-1. Equal sizes return an exact copy.
    """
    if x.ndim < 3:
        raise ShapeError(f"bilinear_upsample_grid expects [..., H, W, C], got {x.shape}")
    h, w = x.shape[-3], x.shape[-2]
    th, tw = target
    if th < h or tw < w:
        raise ValueError(f"downsampling requested: {(h, w)} -> {(th, tw)}")
    if (th, tw) == (h, w):
        return _make(x.data.copy(), (x,), lambda g: (g,), "upsample")
    my = bilinear_matrix(h, th)
    mx = bilinear_matrix(w, tw)
    lead, c = x.shape[:-3], x.shape[-1]

    def resize(a, m_rows, m_cols):
        # rows: [..., H, W*C] -> [..., H', W*C]; cols: per row [W, C] -> [W', C]
        a = np.matmul(m_rows, a.reshape(lead + (a.shape[-3], -1)))
        a = a.reshape(lead + (m_rows.shape[0], -1, c))
        return np.matmul(m_cols, a)

    out = resize(x.data, my, mx)
    return _make(out, (x,), lambda g: (resize(g, my.T, mx.T),), "upsample")


# ------------------------------------------------------------------- backward


def tape(root: Tensor) -> list[Tensor]:
    """Recorded ops reachable from ``root`` in topological order (operands first)."""
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
    """Populate ``.grad`` on every leaf that ``loss`` depends on.

    Leaf gradients are overwritten, never accumulated across calls.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any tensor that requires grad")
    order = tape(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if node._grad_fn is None:
            node.grad = np.array(g) if g is not None else np.zeros(node.shape)
            continue
        if g is None:
            continue
        for parent, pg in zip(node._parents, node._grad_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
