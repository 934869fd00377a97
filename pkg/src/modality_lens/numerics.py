"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations only record themselves while a :class:`ComputationTape` is active
and at least one input requires a gradient; outside a tape everything runs
as plain numpy arithmetic. Gradients accumulate additively into the
``grad`` slot of leaf tensors and are zeroed explicitly by the caller.

Example::

    x = Tensor([1.0, 2.0], requires_grad=True)
    with ComputationTape() as tape:
        loss = (x * x).sum()
    backward(loss, tape)
    x.grad  # array([2., 4.])
"""

from __future__ import annotations

import math
import os
import struct
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, NumericError, ParseError

__all__ = [
    "Tensor",
    "ComputationTape",
    "backward",
    "finite_diff_check",
    "set_debug",
    "matmul",
    "softmax_rows",
    "softmax",
    "log_softmax",
    "layer_norm",
    "scaled_dot_attention",
    "gelu",
    "concat",
    "write_embd",
    "read_embd",
]

_DEBUG = os.environ.get("MODALITY_LENS_DEBUG", "") not in ("", "0")
_TAPES: list["ComputationTape"] = []


def set_debug(flag: bool) -> None:
    """Toggle the per-op NaN/Inf guard."""
    global _DEBUG
    _DEBUG = bool(flag)


def _active_tape() -> "ComputationTape | None":
    return _TAPES[-1] if _TAPES else None


class Tensor:
    """Row-major float64 array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "_leaf", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, *, _check: bool = True):
        arr = np.array(data, dtype=np.float64)
        if _check and not np.all(np.isfinite(arr)):
            raise NumericError("tensor contains NaN or Inf")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._leaf = True

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.grad = None
        t.requires_grad = False
        t._leaf = False
        return t

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
        return self._leaf

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), _check=False)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return self.data.shape[0]

    # arithmetic sugar
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)


class _Node:
    __slots__ = ("out", "inputs", "vjp")

    def __init__(self, out: Tensor, inputs: tuple[Tensor, ...], vjp: Callable):
        self.out = out
        self.inputs = inputs
        self.vjp = vjp


class ComputationTape:
    """Ordered record of differentiable operations.

    Use as a context manager; nested tapes are allowed and only the innermost
    one records.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "ComputationTape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], vjp: Callable) -> None:
        self.nodes.append(_Node(out, inputs, vjp))

    def backward(self, loss: Tensor) -> None:
        backward(loss, self)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor._wrap(np.asarray(x, dtype=np.float64))


def _make(arr: np.ndarray, inputs: tuple[Tensor, ...], vjp: Callable) -> Tensor:
    if _DEBUG and not np.all(np.isfinite(arr)):
        raise NumericError("non-finite value produced by tensor op")
    out = Tensor._wrap(arr)
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(out, inputs, vjp)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def backward(loss: Tensor, tape: ComputationTape) -> None:
    """Propagate d(loss)/d(leaf) into ``grad`` for every requires_grad leaf on the tape."""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        for t in node.inputs:
            if t.requires_grad and t._leaf:
                leaves.setdefault(id(t), t)
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        parts = node.vjp(g)
        for t, gi in zip(node.inputs, parts):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
    if loss._leaf and loss.requires_grad:
        leaves.setdefault(id(loss), loss)
    for key, t in leaves.items():
        g = grads.get(key)
        if g is None:
            g = np.zeros_like(t.data)
        t.grad = g.copy() if t.grad is None else t.grad + g


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data
    return _make(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd
    return _make(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)),
    )


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = _as_tensor(a)
    ad = a.data
    return _make(np.log(ad), (a,), lambda g: (g / ad,))


def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,))


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a) -> Tensor:
    """Tanh-approximated GELU; smooth, so finite differences stay meaningful."""
    a = _as_tensor(a)
    x = a.data
    x2 = x * x
    t = np.tanh(_GELU_C * x * (1.0 + 0.044715 * x2))
    half = 0.5 * (1.0 + t)
    out = x * half

    def vjp(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (half + 0.5 * x * (1.0 - t * t) * dinner),)

    return _make(out, (a,), vjp)


# ---------------------------------------------------------------- reductions / shape


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    shape = a.shape
    axes = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(out), (a,), vjp)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    n = int(np.prod([a.shape[ax] for ax in axes]))
    return sum_(a, axes, keepdims) * (1.0 / n)


def max_(a, axis: int) -> Tensor:
    """Max along one axis; the gradient goes to the first maximal entry."""
    a = _as_tensor(a)
    ad = a.data
    axis = axis % ad.ndim
    idx = np.argmax(ad, axis=axis)
    out = np.take_along_axis(ad, np.expand_dims(idx, axis), axis).squeeze(axis)

    def vjp(g):
        z = np.zeros_like(ad)
        np.put_along_axis(z, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis)
        return (z,)

    return _make(out, (a,), vjp)


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a, axes=None) -> Tensor:
    a = _as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(np.ascontiguousarray(a.data.transpose(axes)), (a,), lambda g: (g.transpose(inv),))


def swap_last(a) -> Tensor:
    a = _as_tensor(a)
    axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    return transpose(a, axes)


def broadcast_to(a, shape) -> Tensor:
    a = _as_tensor(a)
    old = a.shape
    return _make(np.broadcast_to(a.data, shape).copy(), (a,), lambda g: (_unbroadcast(g, old),))


def getitem(a, idx) -> Tensor:
    a = _as_tensor(a)
    shape = a.shape

    basic = _is_basic_index(idx)

    def vjp(g):
        z = np.zeros(shape)
        if basic:
            z[idx] = g
        else:
            np.add.at(z, idx, g)
        return (z,)

    return _make(np.array(a.data[idx]), (a,), vjp)


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, slice, type(Ellipsis))) or i is None for i in items)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = tuple(_as_tensor(t) for t in tensors)
    axis = axis % ts[0].ndim
    sizes = [t.shape[axis] for t in ts]
    cuts = np.cumsum(sizes)[:-1]
    return _make(
        np.concatenate([t.data for t in ts], axis=axis),
        ts,
        lambda g: tuple(np.split(g, cuts, axis=axis)),
    )


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes, broadcasting any leading batch axes."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs operands of rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    if bd.ndim == 2 and ad.ndim > 2:
        # fold batch axes into rows: one GEMM instead of many small ones
        a2 = ad.reshape(-1, ad.shape[-1])
        out = (a2 @ bd).reshape(ad.shape[:-1] + (bd.shape[1],))

        def vjp_flat(g):
            g2 = g.reshape(-1, g.shape[-1])
            ga = (g2 @ bd.T).reshape(ad.shape) if a.requires_grad else None
            gb = a2.T @ g2 if b.requires_grad else None
            return ga, gb

        return _make(out, (a, b), vjp_flat)
    try:
        out = np.matmul(ad, bd)
    except ValueError as exc:
        raise DimensionError(f"matmul batch dimensions differ: {a.shape} @ {b.shape}") from exc

    def vjp(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), ad.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), bd.shape)
        return ga, gb

    return _make(out, (a, b), vjp)


def softmax(x, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _make(s, (x,), vjp)


def softmax_rows(x) -> Tensor:
    """Row-wise softmax of an r x c matrix, stabilised by per-row max subtraction."""
    x = _as_tensor(x)
    if x.ndim != 2 or x.shape[1] < 1:
        raise DimensionError(f"softmax_rows expects a non-empty matrix, got {x.shape}")
    return softmax(x, axis=-1)


def log_softmax(x, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    s = np.exp(out)

    def vjp(g):
        return (g - s * g.sum(axis=axis, keepdims=True),)

    return _make(out, (x,), vjp)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then apply the affine ``gamma * xhat + beta``."""
    if not eps > 0:
        raise ContractError("layer_norm eps must be positive")
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(f"layer_norm affine shape must be ({d},), got {gamma.shape}/{beta.shape}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data
    out = xhat * gd + beta.data

    def vjp(g):
        gx = g * gd
        dx = inv * (
            gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True)
        )
        lead = tuple(range(g.ndim - 1))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _make(out, (x, gamma, beta), vjp)


def scaled_dot_attention(q, k, v) -> Tensor:
    """softmax(q k^T / sqrt(d_h)) v over the last two axes (leading axes are heads/batch)."""
    q, k, v = _as_tensor(q), _as_tensor(k), _as_tensor(v)
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2] or q.shape[:-2] != k.shape[:-2]:
        raise DimensionError(f"attention shapes disagree: q{q.shape} k{k.shape} v{v.shape}")
    scores = matmul(q, swap_last(k)) * (1.0 / math.sqrt(q.shape[-1]))
    return matmul(softmax(scores, axis=-1), v)


# ---------------------------------------------------------------- verification


def finite_diff_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-5,
    n_coords: int = 64,
    seed: int = 0,
    details: bool = False,
):
    """Compare tape gradients of ``f()`` against central differences.

    ``f`` takes no arguments and closes over ``params``; it is evaluated once
    under a tape and twice per sampled coordinate without one. Up to
    ``n_coords`` coordinates per tensor are checked (all of them when the
    tensor is smaller). Returns the max relative error
    ``|g_ad - g_fd| / max(|g_ad|, |g_fd|, 1e-8)``, or with ``details=True``
    a ``(max_err, per_tensor_errors)`` pair.
    """
    if not h > 0:
        raise ContractError("finite-difference step must be positive")
    params = list(params)
    saved = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad = True
        p.grad = None
    try:
        with ComputationTape() as tape:
            loss = f()
        if not np.isfinite(loss.data).all():
            raise NumericError("objective is not finite")
        backward(loss, tape)
        rng = np.random.default_rng(seed)
        worst = 0.0
        per_tensor = []
        for p in params:
            g_ad = np.zeros_like(p.data) if p.grad is None else p.grad
            flat = p.data.reshape(-1)
            if flat.size <= n_coords:
                coords = np.arange(flat.size)
            else:
                coords = np.sort(rng.choice(flat.size, size=n_coords, replace=False))
            err_p = 0.0
            for c in coords:
                orig = flat[c]
                flat[c] = orig + h
                fp = f().item()
                flat[c] = orig - h
                fm = f().item()
                flat[c] = orig
                if not (math.isfinite(fp) and math.isfinite(fm)):
                    raise NumericError("objective is not finite under perturbation")
                g_fd = (fp - fm) / (2 * h)
                ga = float(g_ad.reshape(-1)[c])
                err = abs(ga - g_fd) / max(abs(ga), abs(g_fd), 1e-8)
                err_p = max(err_p, err)
            per_tensor.append(err_p)
            worst = max(worst, err_p)
    finally:
        for p, flag in zip(params, saved):
            p.requires_grad = flag
    return (worst, per_tensor) if details else worst


# ---------------------------------------------------------------- EMBD format

EMBD_MAGIC = b"EMBD"
EMBD_VERSION = 1


def write_embd(t) -> bytes:
    """Serialise to EMBD: magic, u32 version, u32 rank, dims, float32 LE payload."""
    arr = t.data if isinstance(t, Tensor) else np.asarray(t, dtype=np.float64)
    out = bytearray(EMBD_MAGIC)
    out += struct.pack("<II", EMBD_VERSION, arr.ndim)
    out += struct.pack(f"<{arr.ndim}I", *arr.shape)
    with np.errstate(over="raise"):
        try:
            payload = np.ascontiguousarray(arr, dtype="<f4")
        except FloatingPointError as exc:
            raise NumericError("value out of float32 range") from exc
    out += payload.tobytes()
    return bytes(out)


def read_embd(buf: bytes, offset: int = 0, *, return_end: bool = False):
    """Parse one EMBD record; values are widened to float64."""
    if buf[offset : offset + 4] != EMBD_MAGIC:
        raise ParseError(f"bad EMBD magic at byte offset {offset}")
    if len(buf) < offset + 12:
        raise ParseError(f"truncated EMBD header at byte offset {offset}")
    version, rank = struct.unpack_from("<II", buf, offset + 4)
    if version != EMBD_VERSION:
        raise ParseError(f"unsupported EMBD version {version} at byte offset {offset + 4}")
    pos = offset + 12
    if len(buf) < pos + 4 * rank:
        raise ParseError(f"truncated EMBD dims at byte offset {pos}")
    dims = struct.unpack_from(f"<{rank}I", buf, pos)
    pos += 4 * rank
    count = int(np.prod(dims)) if rank else 1
    end = pos + 4 * count
    if len(buf) < end:
        raise ParseError(f"truncated EMBD payload at byte offset {pos}")
    arr = np.frombuffer(buf, dtype="<f4", count=count, offset=pos).astype(np.float64)
    t = Tensor(arr.reshape(dims))
    return (t, end) if return_end else t


def quantize_f32(arr: np.ndarray) -> np.ndarray:
    """Round in place to the nearest float32 value, keeping float64 storage."""
    arr[...] = arr.astype(np.float32)
    return arr
