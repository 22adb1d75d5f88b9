"""Dense tensors with a reverse-mode tape.

Only the primitives the change-detection graph needs are provided. Every
primitive records a node on the active :class:`Graph` (if any input requires
a gradient) together with a hand-written backward rule.

Conv layers keep their outputs in NHWC memory behind an NCHW view, so the
next conv can slice channels-last without a copy.
"""

from __future__ import annotations

import struct
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Graph",
    "DimensionError",
    "ParameterError",
    "ContractError",
    "NonFiniteError",
    "backward",
    "finite_diff_check",
]


class DimensionError(ValueError):
    pass


class ParameterError(ValueError):
    pass


class ContractError(RuntimeError):
    pass


class NonFiniteError(FloatingPointError):
    pass


_FLOATS = (np.float32, np.float64)


def _check_finite(arr: np.ndarray, what: str) -> None:
    # a single reduction catches NaN/Inf; confirm elementwise before raising
    if not np.isfinite(np.add.reduce(arr, axis=None)) and not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values produced by {what}")


class Tensor:
    """N-dimensional float array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_leaf")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.type not in _FLOATS:
            arr = arr.astype(np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        _check_finite(arr, name or "Tensor()")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._leaf = True

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else add_scalar(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other) if isinstance(other, Tensor) else add_scalar(self, -other)

    def __rsub__(self, other):
        return add_scalar(scale(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else scale(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise DimensionError("tensor / tensor is not supported; use mul")
        return scale(self, 1.0 / other)

    def __neg__(self):
        return scale(self, -1.0)


# ---------------------------------------------------------------------------
# tape


@dataclass(eq=False)
class Node:
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    op: str


@dataclass(eq=False)
class Graph:
    """Ordered record of the primitives evaluated while the graph is active.

    Use as a context manager::

        with Graph() as g:
            loss = ...
        backward(loss, g)
    """

    nodes: list[Node] = field(default_factory=list)

    def __enter__(self) -> "Graph":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _stack().pop()

    def __len__(self) -> int:
        return len(self.nodes)


_local = threading.local()


def _stack() -> list[Graph]:
    if not hasattr(_local, "stack"):
        _local.stack = []
    return _local.stack


def _active() -> Graph | None:
    st = _stack()
    return st[-1] if st else None


def _record(op: str, out: np.ndarray, inputs: tuple[Tensor, ...], bw) -> Tensor:
    _check_finite(out, op)
    t = Tensor.__new__(Tensor)
    t.data = out
    t.grad = None
    t.name = None
    t.requires_grad = False
    t._leaf = True
    g = _active()
    if g is not None and any(i.requires_grad for i in inputs):
        t.requires_grad = True
        t._leaf = False
        g.nodes.append(Node(inputs, t, bw, op))
    return t


def backward(loss: Tensor, graph: Graph) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every requires_grad leaf."""
    if loss.size != 1:
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(graph.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            if gi.shape != inp.shape:
                raise ContractError(f"{node.op}: gradient shape {gi.shape} != {inp.shape}")
            if inp._leaf:
                inp.grad = gi.astype(inp.dtype, copy=True) if inp.grad is None else inp.grad + gi
            else:
                k = id(inp)
                grads[k] = gi if k not in grads else grads[k] + gi


# ---------------------------------------------------------------------------
# elementwise


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        axes = [i for i, (x, y) in enumerate(zip(a.shape, b.shape)) if x != y]
        if len(a.shape) != len(b.shape):
            raise DimensionError(f"{op}: rank mismatch {a.shape} vs {b.shape}")
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape} on axes {axes}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _record("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return _record("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _record("mul", ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _record("scale", x.data * x.dtype.type(c), (x,), lambda g: (g * c,))


def add_scalar(x: Tensor, c: float) -> Tensor:
    return _record("add_scalar", x.data + x.dtype.type(c), (x,), lambda g: (g,))


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)
    return _record("relu", out, (x,), lambda g: (g * (x.data > 0),))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # two-sided form avoids exp overflow
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1 / (1 + e), e / (1 + e)).astype(z.dtype, copy=False)


def _sigmoid_backward(y: np.ndarray, g: np.ndarray) -> np.ndarray:
    return g * y * (1 - y)


def sigmoid(x: Tensor) -> Tensor:
    y = _sigmoid(x.data)
    return _record("sigmoid", y, (x,), lambda g: (_sigmoid_backward(y, g),))


def log(x: Tensor) -> Tensor:
    if (x.data <= 0).any():
        raise NonFiniteError("log of non-positive value")
    xd = x.data
    return _record("log", np.log(xd), (x,), lambda g: (g / xd,))


def sqrt(x: Tensor) -> Tensor:
    if (x.data <= 0).any():
        raise NonFiniteError("sqrt needs strictly positive input (add an eps)")
    y = np.sqrt(x.data)
    return _record("sqrt", y, (x,), lambda g: (g / (2 * y),))


def reciprocal(x: Tensor) -> Tensor:
    if (x.data == 0).any():
        raise NonFiniteError("reciprocal of zero")
    y = 1 / x.data
    return _record("reciprocal", y, (x,), lambda g: (-g * y * y,))


def softplus(x: Tensor) -> Tensor:
    """log(1 + exp(x)) in log-sum-exp form."""
    xd = x.data
    return _record("softplus", np.logaddexp(0, xd), (x,), lambda g: (g * _sigmoid(xd),))


def bce_with_logits(x: Tensor, target: np.ndarray | Tensor) -> Tensor:
    """Elementwise binary cross-entropy on logits; target is not differentiated."""
    t = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=x.dtype)
    if t.shape != x.shape:
        raise DimensionError(f"bce_with_logits: logits {x.shape} vs target {t.shape}")
    xd = x.data
    out = np.maximum(xd, 0) - xd * t + np.log1p(np.exp(-np.abs(xd)))
    return _record("bce_with_logits", out, (x,), lambda g: (g * (_sigmoid(xd) - t),))


# ---------------------------------------------------------------------------
# reductions and reshaping


def _axes(axis, ndim) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def reduce_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _axes(axis, x.data.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)
    shape = x.shape

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return _record("sum", np.asarray(out), (x,), bw)


def reduce_mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _axes(axis, x.data.ndim)
    n = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return scale(reduce_sum(x, axes, keepdims), 1.0 / n)


def concat(xs: Sequence[Tensor], axis: int = 1) -> Tensor:
    xs = tuple(xs)
    ref = xs[0].shape
    for t in xs[1:]:
        bad = [i for i, (a, b) in enumerate(zip(ref, t.shape)) if a != b and i != axis % len(ref)]
        if len(t.shape) != len(ref) or bad:
            raise DimensionError(f"concat: {ref} vs {t.shape} differ on axes {bad}")
    out = np.concatenate([t.data for t in xs], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in xs])

    def bw(g):
        sl = [slice(None)] * g.ndim
        res = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            sl[axis] = slice(lo, hi)
            res.append(g[tuple(sl)])
        return res

    return _record("concat", out, xs, bw)


def slice_batch(x: Tensor, start: int, stop: int) -> Tensor:
    """Rows ``start:stop`` of the leading axis."""
    shape = x.shape

    def bw(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[start:stop] = g
        return (full,)

    return _record("slice_batch", x.data[start:stop], (x,), bw)


def channel_dot(a: Tensor, b: Tensor) -> Tensor:
    """Per-pixel dot product over the channel axis: [N,C,H,W] x2 -> [N,1,H,W]."""
    _same_shape("channel_dot", a, b)
    ad, bd = a.data, b.data
    out = np.einsum("nchw,nchw->nhw", ad, bd)[:, None]
    return _record("channel_dot", out, (a, b), lambda g: (g * bd, g * ad))


def l2_normalize(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Divide each pixel's channel vector by sqrt(|v|^2 + eps)."""
    if eps <= 0:
        raise ParameterError("eps must be > 0")
    xd = x.data
    n = np.sqrt(np.einsum("nchw,nchw->nhw", xd, xd)[:, None] + eps)
    y = xd / n

    def bw(g):
        proj = np.einsum("nchw,nchw->nhw", g, y)[:, None]
        return ((g - y * proj) / n,)

    return _record("l2_normalize", y, (x,), bw)


# ---------------------------------------------------------------------------
# spatial


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
           pad: int = 0) -> Tensor:
    """Cross-correlation of x [N,C,H,W] with weight [K,C,kh,kw]."""
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise DimensionError(f"conv2d: expected 4-d input/weight, got {x.shape}, {weight.shape}")
    N, C, H, W = x.shape
    K, Cw, kh, kw = weight.shape
    if C != Cw:
        raise DimensionError(f"conv2d: input channels (axis 1) {C} != weight axis 1 {Cw}")
    if bias is not None and bias.shape != (K,):
        raise DimensionError(f"conv2d: bias shape {bias.shape} != ({K},) (weight axis 0)")
    if stride < 1 or pad < 0:
        raise ParameterError("conv2d: stride >= 1 and pad >= 0 required")
    Ho = (H + 2 * pad - kh) // stride + 1
    Wo = (W + 2 * pad - kw) // stride + 1
    if Ho < 1 or Wo < 1:
        raise DimensionError(f"conv2d: kernel {kh}x{kw} larger than padded input on axes (2, 3)")
    dt = x.dtype
    xh = x.data.transpose(0, 2, 3, 1)
    if pad:
        xp = np.zeros((N, H + 2 * pad, W + 2 * pad, C), dtype=dt)
        xp[:, pad:pad + H, pad:pad + W] = xh
    else:
        xp = xh
    wt = np.ascontiguousarray(weight.data.transpose(2, 3, 1, 0))  # kh,kw,C,K
    hs, ws = stride * (Ho - 1) + 1, stride * (Wo - 1) + 1

    def win(i, j):
        return xp[:, i:i + hs:stride, j:j + ws:stride]

    out = np.zeros((N, Ho, Wo, K), dtype=dt)
    for i in range(kh):
        for j in range(kw):
            out += win(i, j) @ wt[i, j]
    if bias is not None:
        out += bias.data
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        gh = np.ascontiguousarray(g.transpose(0, 2, 3, 1))
        g2 = gh.reshape(-1, K)
        gw = np.empty_like(wt)
        gxp = np.zeros(xp.shape, dtype=dt) if x.requires_grad else None
        for i in range(kh):
            for j in range(kw):
                gw[i, j] = win(i, j).reshape(-1, C).T @ g2
                if gxp is not None:
                    gxp[:, i:i + hs:stride, j:j + ws:stride] += gh @ wt[i, j].T
        gx = None
        if gxp is not None:
            gx = gxp[:, pad:pad + H, pad:pad + W].transpose(0, 3, 1, 2)
        res = [gx, gw.transpose(3, 2, 0, 1)]
        if bias is not None:
            res.append(g2.sum(axis=0))
        return res

    return _record("conv2d", out.transpose(0, 3, 1, 2), inputs, bw)


def _bilinear_matrix(n_in: int, factor: int, dtype) -> np.ndarray:
    # align_corners=False: src = (dst + 0.5) / factor - 0.5, clamped at the borders
    n_out = n_in * factor
    src = (np.arange(n_out) + 0.5) / factor - 0.5
    src = np.clip(src, 0, n_in - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    w1 = src - i0
    m = np.zeros((n_out, n_in), dtype=dtype)
    m[np.arange(n_out), i0] += 1 - w1
    m[np.arange(n_out), i1] += w1
    return m


def upsample(x: Tensor, factor: int, mode: str = "nearest") -> Tensor:
    if factor < 1:
        raise ParameterError(f"upsample factor must be >= 1, got {factor}")
    if mode not in ("nearest", "bilinear"):
        raise ParameterError(f"unknown upsample mode {mode!r}")
    if factor == 1:
        return _record("upsample", x.data, (x,), lambda g: (g,))
    N, C, H, W = x.shape
    if mode == "nearest":
        out = x.data.repeat(factor, axis=2).repeat(factor, axis=3)

        def bw(g):
            return (g.reshape(N, C, H, factor, W, factor).sum(axis=(3, 5)),)

        return _record("upsample", out, (x,), bw)
    mh = _bilinear_matrix(H, factor, x.dtype)
    mw = _bilinear_matrix(W, factor, x.dtype)
    out = np.einsum("oh,nchw,pw->ncop", mh, x.data, mw, optimize=True)

    def bw(g):
        return (np.einsum("oh,ncop,pw->nchw", mh, g, mw, optimize=True),)

    return _record("upsample", out, (x,), bw)


def downsample_nearest(x: np.ndarray | Tensor, factor: int) -> np.ndarray:
    """Keep every ``factor``-th pixel (top-left of each block). Not differentiable."""
    arr = x.data if isinstance(x, Tensor) else np.asarray(x)
    if factor < 1:
        raise ParameterError(f"downsample factor must be >= 1, got {factor}")
    return arr[..., ::factor, ::factor]


# ---------------------------------------------------------------------------
# gradient checking


def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-6,
                      coords: Iterable[int] | None = None) -> float:
    """Max relative error between the taped gradient and central differences.

    ``f`` maps a Tensor to a scalar Tensor. ``coords`` optionally restricts the
    check to a subset of flat indices. The error per coordinate is
    ``|a - n| / max(1, |a|, |n|)``.
    """
    if not 1e-7 <= h <= 1e-4:
        raise ParameterError(f"h must lie in [1e-7, 1e-4], got {h}")
    base = np.array(x.data, dtype=np.float64)
    leaf = Tensor(base.copy(), requires_grad=True)
    with Graph() as g:
        out = f(leaf)
    backward(out, g)
    analytic = np.zeros_like(base) if leaf.grad is None else leaf.grad.reshape(base.shape)
    flat = base.reshape(-1)
    idx = range(flat.size) if coords is None else coords
    worst = 0.0
    for k in idx:
        old = flat[k]
        flat[k] = old + h
        fp = float(f(Tensor(base.copy())).data)
        flat[k] = old - h
        fm = float(f(Tensor(base.copy())).data)
        flat[k] = old
        num = (fp - fm) / (2 * h)
        a = float(analytic.reshape(-1)[k])
        worst = max(worst, abs(a - num) / max(1.0, abs(a), abs(num)))
    return worst


# ---------------------------------------------------------------------------
# serialization: "DCLT", u32 rank, u32 extents..., little-endian float32 data

MAGIC = b"DCLT"


class IntegrityError(IOError):
    pass


def to_bytes(x: Tensor | np.ndarray) -> bytes:
    arr = x.data if isinstance(x, Tensor) else np.asarray(x)
    head = MAGIC + struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape)
    return head + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def from_bytes(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Decode one record starting at ``offset``; return (array, next offset)."""
    if buf[offset:offset + 4] != MAGIC:
        raise IntegrityError(f"bad tensor magic at byte {offset}")
    if len(buf) < offset + 8:
        raise IntegrityError("truncated tensor header")
    (rank,) = struct.unpack_from("<I", buf, offset + 4)
    pos = offset + 8
    if len(buf) < pos + 4 * rank:
        raise IntegrityError("truncated tensor header")
    shape = struct.unpack_from(f"<{rank}I", buf, pos)
    pos += 4 * rank
    n = int(np.prod(shape)) if rank else 1
    end = pos + 4 * n
    if len(buf) < end:
        raise IntegrityError(f"truncated tensor data: need {end - pos} bytes, have {len(buf) - pos}")
    arr = np.frombuffer(buf, dtype="<f4", count=n, offset=pos).astype(np.float32).reshape(shape)
    return arr, end
