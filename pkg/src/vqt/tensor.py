"""Dense tensors with reverse-mode automatic differentiation.

Storage is a C-contiguous numpy buffer; every op returns a fresh buffer
(reshape and transpose copy). Each op result records its parents and a
backward rule; ``backward`` replays those rules in reverse topological order.
"""

from __future__ import annotations

import contextlib
import contextvars
import math

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "ContractError",
    "NonFiniteError",
    "tensor",
    "no_grad",
    "grad_enabled",
    "add",
    "sub",
    "mul",
    "neg",
    "scale",
    "matmul",
    "sum",
    "mean",
    "reshape",
    "transpose",
    "concat",
    "take",
    "broadcast_to",
    "abs",
    "where",
    "softmax",
    "layer_norm",
    "gelu",
    "embedding",
    "bilinear_sample",
    "attention",
    "backward",
]

_GRAD_ENABLED = contextvars.ContextVar("vqt_grad_enabled", default=True)


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(RuntimeError):
    """A caller broke an op's precondition."""


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (context-local)."""
    token = _GRAD_ENABLED.set(False)
    try:
        yield
    finally:
        _GRAD_ENABLED.reset(token)


def grad_enabled() -> bool:
    return _GRAD_ENABLED.get()


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr if arr.flags.c_contiguous else arr.copy(order="C")
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = ()
        self._backward = None
        self._op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{rg})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def _not_scalar(t):
    raise ContractError(f"item() needs a single-element tensor, got shape {t.shape}")


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype if dtype is not None else np.float64))


def _result(data: np.ndarray, parents: tuple, backward_fn, op: str) -> Tensor:
    if not np.isfinite(data).all():
        raise NonFiniteError(f"{op} produced non-finite values")
    out = Tensor(data)
    if _GRAD_ENABLED.get() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
        out._op = op
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _pair(a, b) -> tuple[Tensor, Tensor]:
    # Python scalars adopt the tensor operand's dtype.
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        return a, _as_tensor(b, a.dtype)
    if isinstance(b, Tensor) and not isinstance(a, Tensor):
        return _as_tensor(a, b.dtype), b
    return _as_tensor(a), _as_tensor(b)


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from None


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "add")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "sub")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "mul")

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), bw, "mul")


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a non-differentiable scalar."""
    return _result(a.data * c, (a,), lambda g: (g * c,), "scale")


def abs(a: Tensor) -> Tensor:  # noqa: A001
    sign = np.sign(a.data)
    return _result(np.abs(a.data), (a,), lambda g: (g * sign,), "abs")


def where(cond, a, b) -> Tensor:
    """Select from ``a`` where ``cond`` holds, else ``b``; ``cond`` is a constant mask."""
    a, b = _pair(a, b)
    cond = np.asarray(cond, dtype=bool)

    def bw(g):
        return (
            _unbroadcast(np.where(cond, g, 0.0), a.shape),
            _unbroadcast(np.where(cond, 0.0, g), b.shape),
        )

    data = np.where(cond, a.data, b.data).astype(np.result_type(a.data, b.data))
    return _result(data, (a, b), bw, "where")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x**3)
    th = np.tanh(inner)
    out = 0.5 * x * (1.0 + th)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x**2)
        return (g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th**2) * dinner),)

    return _result(out, (a,), bw, "gelu")


# ------------------------------------------------------------------ reductions


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(np.asarray(out), (a,), bw, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    count = 1
    for ax in axes:
        count *= a.shape[ax]
    return scale(sum(a, axes, keepdims), 1.0 / count)


# ---------------------------------------------------------------------- shape


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = a.data.reshape(shape).copy()
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} into {shape}") from None
    return _result(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    """Permute axes (reverse order when ``axes`` is None); always copies."""
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(a.data.transpose(axes))
    return _result(out, (a,), lambda g: (np.ascontiguousarray(g.transpose(inv)),), "transpose")


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ContractError("concat needs at least one tensor")
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(
            x != y for i, (x, y) in enumerate(zip(t.shape, ref)) if i != ax
        ):
            raise ShapeError(f"concat: {ref} and {t.shape} disagree off axis {axis}")
    sizes = [t.shape[ax] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=ax)

    def bw(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=ax))

    return _result(out, tuple(tensors), bw, "concat")


def take(a: Tensor, indices, axis: int = 0) -> Tensor:
    """Gather slices along ``axis``; repeated indices accumulate gradient."""
    idx = np.asarray(indices, dtype=np.intp)
    ax = axis % a.ndim
    out = np.take(a.data, idx, axis=ax)

    def bw(g):
        full = np.zeros_like(a.data)
        moved = np.moveaxis(full, ax, 0)
        np.add.at(moved, idx, np.moveaxis(g, ax, 0))
        return (full,)

    return _result(np.ascontiguousarray(out), (a,), bw, "take")


def embedding(table: Tensor, ids) -> Tensor:
    """Row lookup into a (vocab, d) table."""
    return take(table, ids, axis=0)


def broadcast_to(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = np.broadcast_to(a.data, shape).copy()
    except ValueError:
        raise ShapeError(f"broadcast_to: cannot broadcast {a.shape} to {shape}") from None
    return _result(out, (a,), lambda g: (_unbroadcast(g, a.shape),), "broadcast_to")


# --------------------------------------------------------------------- linalg


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from None

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _result(out, (a, b), bw, "matmul")


_EXP_SAFE = {np.dtype(np.float32): 80.0, np.dtype(np.float64): 600.0}


def _softmax_np(x: np.ndarray, axis: int) -> np.ndarray:
    # The per-row max shift only guards exp against overflow; a whole-array
    # bound (one fast reduction) shows when it is unnecessary. NaN fails the
    # comparison and takes the shifted path.
    if x.size and np.abs(x).max() < _EXP_SAFE.get(x.dtype, 0.0):
        e = np.exp(x)
    else:
        e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    if not -a.ndim <= axis < a.ndim:
        raise ContractError(f"softmax: axis {axis} out of range for shape {a.shape}")
    y = _softmax_np(a.data, axis)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _result(y, (a,), bw, "softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply ``gain`` and ``bias``."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: gain {gain.shape} / bias {bias.shape} vs last axis {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def bw(g):
        gx = ggain = gbias = None
        if x.requires_grad:
            gh = g * gain.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        if gain.requires_grad:
            ggain = (g * xhat).reshape(-1, d).sum(axis=0)
        if bias.requires_grad:
            gbias = g.reshape(-1, d).sum(axis=0)
        return gx, ggain, gbias

    return _result(out, (x, gain, bias), bw, "layer_norm")


def attention(q: Tensor, k: Tensor, v: Tensor, scale_factor: float) -> Tensor:
    """Fused ``softmax(scale * q k^T) v`` over the last two axes.

    q: (..., S, e), k: (..., T, e), v: (..., T, f) -> (..., S, f).
    """
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"attention: q {q.shape}, k {k.shape}, v {v.shape}")
    s = np.matmul(q.data, np.swapaxes(k.data, -1, -2)) * scale_factor
    w = _softmax_np(s, -1)
    out = np.matmul(w, v.data)

    def bw(g):
        gv = np.matmul(np.swapaxes(w, -1, -2), g)
        gw = np.matmul(g, np.swapaxes(v.data, -1, -2))
        gs = w * (gw - (gw * w).sum(axis=-1, keepdims=True)) * scale_factor
        gq = np.matmul(gs, k.data)
        gk = np.matmul(np.swapaxes(gs, -1, -2), q.data)
        return (_unbroadcast(gq, q.shape), _unbroadcast(gk, k.shape),
                _unbroadcast(gv, v.shape))

    return _result(out, (q, k, v), bw, "attention")


def attention_weights(q: np.ndarray, k: np.ndarray, scale_factor: float) -> np.ndarray:
    """Softmax weights of :func:`attention`, for diagnostics only."""
    return _softmax_np(np.matmul(q, np.swapaxes(k, -1, -2)) * scale_factor, -1)


def bilinear_sample(grid: Tensor, offsets: Tensor) -> Tensor:
    """Resample a square token grid at integer positions plus continuous offsets.

    grid: (..., g, g, d); offsets: (..., g, g, 2) as (d_row, d_col) in cell
    units. Coordinates are clamped to [0, g-1] before interpolation, so
    clamped coordinates get zero offset gradient.
    """
    gs = grid.shape
    if len(gs) < 3 or gs[-3] != gs[-2]:
        raise ShapeError(f"bilinear_sample: grid must be (..., g, g, d), got {gs}")
    if offsets.shape != gs[:-1] + (2,):
        raise ShapeError(f"bilinear_sample: offsets {offsets.shape} vs grid {gs}")
    g, d = gs[-2], gs[-1]
    lead = gs[:-3]
    nb = int(np.prod(lead)) if lead else 1
    G = grid.data.reshape(nb, g, g, d)
    off = offsets.data.reshape(nb, g, g, 2)

    base = np.arange(g, dtype=off.dtype)
    rows = base[None, :, None] + off[..., 0]
    cols = base[None, None, :] + off[..., 1]
    r = np.clip(rows, 0, g - 1)
    c = np.clip(cols, 0, g - 1)
    r0 = np.floor(r).astype(np.intp)
    c0 = np.floor(c).astype(np.intp)
    r1 = np.minimum(r0 + 1, g - 1)
    c1 = np.minimum(c0 + 1, g - 1)
    fr = (r - r0)[..., None]
    fc = (c - c0)[..., None]
    b = np.arange(nb)[:, None, None]

    g00, g01 = G[b, r0, c0], G[b, r0, c1]
    g10, g11 = G[b, r1, c0], G[b, r1, c1]
    w00, w01 = (1 - fr) * (1 - fc), (1 - fr) * fc
    w10, w11 = fr * (1 - fc), fr * fc
    out = w00 * g00 + w01 * g01 + w10 * g10 + w11 * g11

    def bw(gout):
        gout = gout.reshape(nb, g, g, d)
        ggrid = goff = None
        if grid.requires_grad:
            acc = np.zeros_like(G)
            np.add.at(acc, (b, r0, c0), w00 * gout)
            np.add.at(acc, (b, r0, c1), w01 * gout)
            np.add.at(acc, (b, r1, c0), w10 * gout)
            np.add.at(acc, (b, r1, c1), w11 * gout)
            ggrid = acc.reshape(gs)
        if offsets.requires_grad:
            dr = ((1 - fc) * (g10 - g00) + fc * (g11 - g01)) * gout
            dc = ((1 - fr) * (g01 - g00) + fr * (g11 - g10)) * gout
            inside_r = (rows >= 0) & (rows <= g - 1)
            inside_c = (cols >= 0) & (cols <= g - 1)
            goff = np.stack([dr.sum(-1) * inside_r, dc.sum(-1) * inside_c], axis=-1)
            goff = goff.reshape(offsets.shape).astype(offsets.dtype, copy=False)
        return ggrid, goff

    return _result(out.reshape(gs), (grid, offsets), bw, "bilinear_sample")


# ------------------------------------------------------------------- backward


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
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
    """Populate ``.grad`` on every requires-grad tensor reachable from ``loss``.

    Gradients accumulate into existing ``.grad`` buffers; clear them with
    ``zero_grad`` between steps.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("backward called on a tensor that does not require grad")
    order = _topo_order(loss)
    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        node.grad = g.copy() if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            pending[key] = pg if key not in pending else pending[key] + pg
