"""Minimal reverse-mode automatic differentiation over numpy arrays.

Every differentiable op accepts either a single item (``[C, H, W]``) or a
batch (``[N, C, H, W]``) for the spatial ops; the batch form is what the
training loop uses.  Broadcasting is deliberately restricted: pointwise
binary ops only combine identical shapes or a tensor with a scalar.  Channel
modulation (scale/shift per channel) goes through :func:`channel_affine`.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Evaluate without recording operations (the stop-gradient path)."""
    prev = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class ShapeError(ValueError):
    pass


def _as_array(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data)
    if dtype is not None:
        return arr.astype(dtype, copy=False)
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float32)
    return arr


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str = ""):
        self.data = _as_array(data, dtype)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None
        self.op = "leaf"
        self.name = name

    # ------------------------------------------------------------------ basics
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # --------------------------------------------------------------- operators
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def relu(self):
        return relu(self)

    def sigmoid(self):
        return sigmoid(self)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def log(self):
        return log(self)

    def backward(self) -> None:
        backward(self)


def _make(data: np.ndarray, parents: Sequence[Tensor], fn, op: str) -> Tensor:
    out = Tensor(data)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = fn
        out.op = op
    return out


def _lift(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype) if dtype is not None else x)


def _check_binary(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape == b.shape or a.size == 1 and a.ndim == 0 or b.size == 1 and b.ndim == 0:
        return
    raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape} "
                     "(only identical shapes or scalar operands are allowed)")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.asarray(g.sum(), dtype=g.dtype).reshape(shape)


# ---------------------------------------------------------------- pointwise
def add(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    _check_binary(a, b, "add")
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    _check_binary(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    _check_binary(a, b, "mul")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)), "mul")


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return _make(np.where(pos, x.data, 0).astype(x.data.dtype), (x,),
                 lambda g: (g * pos,), "relu")


def sigmoid(x: Tensor) -> Tensor:
    # split by sign so exp never overflows
    z = x.data
    e = np.exp(-np.abs(z))
    s = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(z.dtype)
    return _make(s, (x,), lambda g: (g * s * (1 - s),), "sigmoid")


def log(x: Tensor) -> Tensor:
    xd = x.data
    return _make(np.log(xd), (x,), lambda g: (g / xd,), "log")


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    xd = x.data
    inside = (xd >= lo) & (xd <= hi)
    return _make(np.clip(xd, lo, hi), (x,), lambda g: (g * inside,), "clip")


def _norm_axes(axis, ndim: int) -> tuple:
    if axis is None:
        return tuple(range(ndim))
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    return tuple(a % ndim for a in axes)


def tsum(x: Tensor, axis=None) -> Tensor:
    """Sum over ``axis`` (all axes by default)."""
    shape = x.shape
    axes = _norm_axes(axis, x.ndim)
    kept = tuple(1 if i in axes else n for i, n in enumerate(shape))
    out = np.asarray(x.data.sum(axis=axes), dtype=x.data.dtype)
    return _make(out, (x,), lambda g: (np.broadcast_to(g.reshape(kept), shape).copy(),), "sum")


def mean(x: Tensor, axis=None) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    n = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return mul(tsum(x, axis), 1.0 / n)


def div(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    _check_binary(a, b, "div")
    ad, bd = a.data, b.data
    return _make(ad / bd, (a, b),
                 lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * ad / (bd * bd), bd.shape)),
                 "div")


def reshape(x: Tensor, shape: tuple) -> Tensor:
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def concat_channels(tensors: Sequence[Tensor]) -> Tensor:
    """Concatenate along the channel axis (axis 0 for [C,H,W], 1 for [N,C,H,W])."""
    if not tensors:
        raise ShapeError("concat_channels: empty input")
    nd = tensors[0].ndim
    if nd not in (3, 4):
        raise ShapeError(f"concat_channels expects [C,H,W] or [N,C,H,W], got rank {nd}")
    axis = nd - 3
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != nd or t.shape[:axis] != ref[:axis] or t.shape[axis + 1:] != ref[axis + 1:]:
            raise ShapeError(f"concat_channels: incompatible shapes {ref} and {t.shape}")
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def back(g):
        idx = [slice(None)] * nd
        out = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx[axis] = slice(lo, hi)
            out.append(g[tuple(idx)])
        return out

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), back, "concat")


# ------------------------------------------------------------------- dense
def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """x: [..., D_in], weight: [D_out, D_in], bias: [D_out]."""
    if weight.ndim != 2 or x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"linear: bias {bias.shape} does not match weight {weight.shape}")
    xd, wd = x.data, weight.data
    out = xd @ wd.T
    if bias is not None:
        out = out + bias.data

    def back(g):
        gx = g @ wd
        g2 = g.reshape(-1, g.shape[-1])
        gw = g2.T @ xd.reshape(-1, xd.shape[-1])
        grads = [gx, gw]
        if bias is not None:
            grads.append(g2.sum(0))
        return grads

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, back, "linear")


def channel_affine(x: Tensor, scale: Tensor, shift: Tensor) -> Tensor:
    """Per-channel modulation ``(1 + scale) * x + shift``.

    x is [C,H,W] with scale/shift [C], or [N,C,H,W] with scale/shift [N,C].
    """
    lead = x.shape[:-2]
    if scale.shape != lead or shift.shape != lead:
        raise ShapeError(f"channel_affine: scale {scale.shape} / shift {shift.shape} "
                         f"must match leading dims {lead} of {x.shape}")
    xd = x.data
    s = scale.data[..., None, None]
    out = (1 + s) * xd + shift.data[..., None, None]
    return _make(out, (x, scale, shift),
                 lambda g: (g * (1 + s), (g * xd).sum((-2, -1)), g.sum((-2, -1))),
                 "channel_affine")


# ------------------------------------------------------------------ spatial
def _batched(x: Tensor, op: str, channels: Optional[int] = None) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        d, single = x.data[None], True
    elif x.ndim == 4:
        d, single = x.data, False
    else:
        raise ShapeError(f"{op}: expected [C,H,W] or [N,C,H,W], got shape {x.shape}")
    if channels is not None and d.shape[1] != channels:
        raise ShapeError(f"{op}: input has {d.shape[1]} channels, weight expects {channels}")
    return d, single


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation via im2col and a single GEMM."""
    if weight.ndim != 4 or weight.shape[2] != weight.shape[3] or weight.shape[2] % 2 == 0:
        raise ShapeError(f"conv2d: weight must be [C_out,C_in,k,k] with odd k, got {weight.shape}")
    if stride < 1 or padding < 0:
        raise ShapeError(f"conv2d: invalid stride {stride} / padding {padding}")
    cout, cin, k, _ = weight.shape
    xd, single = _batched(x, "conv2d", cin)
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv2d: bias {bias.shape} does not match C_out={cout}")
    n, _, h, w = xd.shape
    hp, wp = h + 2 * padding, w + 2 * padding
    if hp < k or wp < k:
        raise ShapeError(f"conv2d: input {h}x{w} with padding {padding} is smaller than kernel {k}")
    ho, wo = (hp - k) // stride + 1, (wp - k) // stride + 1
    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
    # cols laid out [C, k, k, N, Ho, Wo] so the GEMM runs over N*Ho*Wo at once
    xt = xp.transpose(1, 0, 2, 3)
    cols = np.empty((cin, k, k, n, ho, wo), dtype=xd.dtype)
    for ky in range(k):
        for kx in range(k):
            cols[:, ky, kx] = xt[:, :, ky:ky + stride * ho:stride, kx:kx + stride * wo:stride]
    cols2 = cols.reshape(cin * k * k, n * ho * wo)
    w2 = weight.data.reshape(cout, -1)
    out = (w2 @ cols2).reshape(cout, n, ho, wo)
    if bias is not None:
        out += bias.data[:, None, None, None]
    out = np.ascontiguousarray(out.transpose(1, 0, 2, 3))

    def back(g):
        g = g[None] if single else g
        gt = g.transpose(1, 0, 2, 3).reshape(cout, -1)
        gw = (gt @ cols2.T).reshape(weight.shape)
        dx = None
        if x.requires_grad:
            dcols = (w2.T @ gt).reshape(cin, k, k, n, ho, wo)
            dxp = np.zeros((cin, n, hp, wp), dtype=xd.dtype)
            for ky in range(k):
                for kx in range(k):
                    dxp[:, :, ky:ky + stride * ho:stride, kx:kx + stride * wo:stride] += dcols[:, ky, kx]
            dx = dxp[:, :, padding:padding + h, padding:padding + w].transpose(1, 0, 2, 3)
            dx = np.ascontiguousarray(dx)
            dx = dx[0] if single else dx
        grads = [dx, gw]
        if bias is not None:
            grads.append(gt.sum(1))
        return grads

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out[0] if single else out, parents, back, "conv2d")


def bilinear_matrix(n_in: int, n_out: int, dtype=np.float32) -> np.ndarray:
    """Row-stochastic [n_out, n_in] interpolation matrix, align-corners=False."""
    scale = n_in / n_out
    src = (np.arange(n_out) + 0.5) * scale - 0.5
    src = np.clip(src, 0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    m = np.zeros((n_out, n_in), dtype=np.float64)
    rows = np.arange(n_out)
    np.add.at(m, (rows, lo), 1 - frac)
    np.add.at(m, (rows, hi), frac)
    return m.astype(dtype)


def resize_bilinear(x: Tensor, size: tuple[int, int]) -> Tensor:
    xd, single = _batched(x, "resize_bilinear")
    h, w = xd.shape[-2:]
    uh = bilinear_matrix(h, size[0], xd.dtype)
    uw = bilinear_matrix(w, size[1], xd.dtype)
    out = uh @ (xd @ uw.T)

    def back(g):
        g = g[None] if single else g
        gx = (uh.T @ g) @ uw
        return (gx[0] if single else gx,)

    return _make(out[0] if single else out, (x,), back, "resize_bilinear")


def upsample_bilinear(x: Tensor, factor: int) -> Tensor:
    if int(factor) != factor or factor < 1:
        raise ValueError(f"upsample_bilinear: factor must be an integer >= 1, got {factor}")
    if factor == 1:
        return x
    h, w = x.shape[-2:]
    return resize_bilinear(x, (h * factor, w * factor))


# ----------------------------------------------------------------- backward
def topological_order(root: Tensor) -> list[Tensor]:
    """Operations reachable from ``root``, producers before consumers."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    if loss.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("backward: loss does not depend on any tensor requiring grad")
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=loss.data.dtype)}
    for node in reversed(topological_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        node.grad = g if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


def zero_grads(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None
