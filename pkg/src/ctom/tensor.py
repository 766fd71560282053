"""A small dense tensor type with reverse-mode automatic differentiation.

Only the operations needed by the matting network, the compositor and the
losses are provided. Image-like tensors use channel-first layout, either
``[C, H, W]`` or batched ``[N, C, H, W]``; every spatial op accepts both.

Storage precision follows the inputs: training runs in float32, gradient
checks in float64.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ParameterError, ShapeError


class Tensor:
    """n-d array plus the bookkeeping needed to backpropagate through it."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        _parents: tuple["Tensor", ...] = (),
        _backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None,
        op: str = "leaf",
        dtype=None,
    ):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents = _parents
        self._backward = _backward
        self.op = op

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op}, requires_grad={self.requires_grad})"

    def backward(self, grad: np.ndarray | None = None) -> None:
        backward(self, grad)

    # -- operators ------------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other, self.dtype)))

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise ParameterError("division is only supported by constants")
        return mul(self, 1.0 / np.asarray(other, dtype=self.dtype))

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return tmean(self, axis)


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn, op: str) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    return Tensor(
        data,
        requires_grad=needs,
        _parents=parents if needs else (),
        _backward=backward_fn if needs else None,
        op=op,
    )


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# -- graph traversal ------------------------------------------------------------


def topological_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` with every input ahead of its consumers."""
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
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor, grad: np.ndarray | None = None) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every tensor requiring grad.

    ``loss`` must be a scalar unless an explicit output gradient is passed.
    Repeated calls add to existing gradients.
    """
    if grad is None:
        if loss.data.size != 1:
            raise ShapeError("backward() needs a scalar loss", shape=list(loss.shape))
        grad = np.ones_like(loss.data)
    else:
        grad = np.asarray(grad, dtype=loss.dtype)
        if grad.shape != loss.shape:
            raise ShapeError("output gradient shape differs from tensor shape")
    if not loss.requires_grad:
        return

    pending: dict[int, np.ndarray] = {id(loss): grad}
    for node in reversed(topological_order(loss)):
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
            if key in pending:
                pending[key] = pending[key] + pg
            else:
                pending[key] = pg


# -- elementwise arithmetic -----------------------------------------------------


def add(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    out = a.data + b.data.astype(a.dtype, copy=False)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(out, (a, b), bw, "add")


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    bd = b.data.astype(a.dtype, copy=False)
    out = a.data * bd

    def bw(g):
        ga = _unbroadcast(g * bd, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), bw, "mul")


def minimum(a, b) -> Tensor:
    """Elementwise min; ties send the gradient to ``a``."""
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    pick_a = a.data <= b.data
    out = np.where(pick_a, a.data, b.data).astype(a.dtype, copy=False)

    def bw(g):
        return (
            _unbroadcast(np.where(pick_a, g, 0), a.shape),
            _unbroadcast(np.where(pick_a, 0, g), b.shape),
        )

    return _make(out, (a, b), bw, "minimum")


def clamp(a: Tensor, lo, hi) -> Tensor:
    """Clip to ``[lo, hi]`` (scalars or broadcastable constant arrays)."""
    lo = np.asarray(lo, dtype=a.dtype)
    hi = np.asarray(hi, dtype=a.dtype)
    out = np.minimum(np.maximum(a.data, lo), hi)
    inside = (a.data >= lo) & (a.data <= hi)
    return _make(out, (a,), lambda g: (g * inside,), "clamp")


def log(a: Tensor) -> Tensor:
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def square(a: Tensor) -> Tensor:
    return _make(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,), "square")


def vector_norm(a: Tensor, axis: int = -3, grad_eps: float = 1e-12) -> Tensor:
    """Euclidean norm along ``axis``.

    The forward value is the exact norm. ``grad_eps`` only enters the
    derivative, keeping it finite where the vector is zero.
    """
    sq = (a.data * a.data).sum(axis=axis, keepdims=True)
    out = np.sqrt(sq)

    def bw(g):
        return (g * a.data / np.sqrt(sq + grad_eps),)

    return _make(np.squeeze(out, axis=axis), (a,), lambda g: bw(np.expand_dims(g, axis)), "norm")


def weighted_sum(terms: Sequence, weights: Sequence[float]) -> Tensor:
    """sum_i w_i * t_i over scalar tensors, accumulated with ``math.fsum``."""
    terms = [_as_tensor(t) for t in terms]
    if any(t.data.size != 1 for t in terms):
        raise ShapeError("weighted_sum combines scalar tensors only")
    dtype = np.result_type(*[t.dtype for t in terms])
    value = math.fsum(float(w) * float(t.data.reshape(-1)[0]) for t, w in zip(terms, weights))

    def bw(g):
        return tuple((g * w).astype(t.dtype).reshape(t.shape) for t, w in zip(terms, weights))

    return _make(np.asarray(value, dtype=dtype), tuple(terms), bw, "weighted_sum")


def tsum(a: Tensor, axis=None) -> Tensor:
    out = a.data.sum(axis=axis)

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).astype(a.dtype),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).astype(a.dtype),)

    return _make(np.asarray(out, dtype=a.dtype), (a,), bw, "sum")


def tmean(a: Tensor, axis=None) -> Tensor:
    if axis is None:
        n = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return mul(tsum(a, axis), 1.0 / n)


def getitem(a: Tensor, index) -> Tensor:
    out = a.data[index]

    def bw(g):
        full = np.zeros_like(a.data)
        full[index] += g
        return (full,)

    return _make(np.array(out), (a,), bw, "getitem")


def concat(tensors: Iterable[Tensor], axis: int = -3) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    dtype = tensors[0].dtype
    out = np.concatenate([t.data.astype(dtype, copy=False) for t in tensors], axis=axis)
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _make(out, tuple(tensors), bw, "concat")


# -- activations ---------------------------------------------------------------


def relu(a: Tensor) -> Tensor:
    pos = a.data > 0
    return _make(a.data * pos, (a,), lambda g: (g * pos,), "relu")


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _make(y, (a,), lambda g: (g * (1.0 - y * y),), "tanh")


def sigmoid(a: Tensor) -> Tensor:
    # split by sign so exp never overflows
    x = a.data
    e = np.exp(-np.abs(x))
    y = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(a.dtype, copy=False)
    # y * (1 - y) rounds to 0 once y == 1 in float32; this form stays positive
    dy = (e / ((1.0 + e) * (1.0 + e))).astype(a.dtype, copy=False)
    return _make(y, (a,), lambda g: (g * dy,), "sigmoid")


_ACTIVATIONS = {"relu": relu, "tanh": tanh, "sigmoid": sigmoid}


def activation(a: Tensor, kind: str) -> Tensor:
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise ParameterError(f"unknown activation {kind!r}", allowed=sorted(_ACTIVATIONS)) from None
    return fn(a)


def channel_softmax(a: Tensor) -> Tensor:
    """Softmax over the channel axis (third from last)."""
    if a.ndim < 3 or a.shape[-3] < 2:
        raise ShapeError("channel_softmax needs at least 2 channels", shape=list(a.shape))
    z = a.data - a.data.max(axis=-3, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-3, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=-3, keepdims=True)),)

    return _make(s, (a,), bw, "softmax")


# -- spatial ops --------------------------------------------------------------------


def _batched(x: np.ndarray) -> np.ndarray:
    return x[None] if x.ndim == 3 else x


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1) -> Tensor:
    """Cross-correlation with replicate ("edge clamp") padding.

    Output spatial size is ``ceil(H / stride)``.
    """
    if kernel.ndim != 4 or kernel.shape[2] != kernel.shape[3] or kernel.shape[2] % 2 == 0:
        raise ShapeError("kernel must be [C_out, C_in, k, k] with odd k", shape=list(kernel.shape))
    if stride not in (1, 2):
        raise ParameterError("stride must be 1 or 2", stride=stride)
    if x.ndim not in (3, 4):
        raise ShapeError("conv2d input must be [C,H,W] or [N,C,H,W]", shape=list(x.shape))
    squeeze = x.ndim == 3
    xd = _batched(x.data)
    n, c, h, w = xd.shape
    c_out, c_in, k, _ = kernel.shape
    if c_in != c:
        raise ShapeError("kernel input channels do not match input", kernel_c_in=c_in, input_c=c)
    p = (k - 1) // 2
    ho, wo = -(-h // stride), -(-w // stride)
    xp = np.pad(xd, ((0, 0), (0, 0), (p, p), (p, p)), mode="edge") if p else xd
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    # channel-major im2col: rows (c, i, j), columns (n, y, x)
    cols = win.transpose(1, 4, 5, 0, 2, 3).reshape(c * k * k, n * ho * wo)
    wmat = kernel.data.reshape(c_out, c * k * k).astype(xd.dtype, copy=False)
    out = wmat @ cols
    if bias is not None:
        out += bias.data.astype(xd.dtype, copy=False)[:, None]
    out = np.ascontiguousarray(out.reshape(c_out, n, ho, wo).transpose(1, 0, 2, 3))
    if squeeze:
        out = out[0]

    def bw(g):
        g4 = _batched(g)
        gm = g4.transpose(1, 0, 2, 3).reshape(c_out, n * ho * wo)
        gk = (gm @ cols.T).reshape(kernel.shape) if kernel.requires_grad else None
        gb = gm.sum(axis=1) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (wmat.T @ gm).reshape(c, k, k, n, ho, wo)
            dxp = np.zeros((c, n) + xp.shape[2:], dtype=xd.dtype)
            for i in range(k):
                for j in range(k):
                    dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[:, i, j]
            dxp = dxp.transpose(1, 0, 2, 3)
            gx = _fold_edge_pad(dxp, p, h, w) if p else np.ascontiguousarray(dxp)
            if squeeze:
                gx = gx[0]
        return gx, gk, gb

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return _make(out, parents, bw, "conv2d")


def _fold_edge_pad(d: np.ndarray, p: int, h: int, w: int) -> np.ndarray:
    top = d[:, :, :p, :].sum(axis=2)
    bottom = d[:, :, p + h :, :].sum(axis=2)
    d = d[:, :, p : p + h, :].copy()
    d[:, :, 0, :] += top
    d[:, :, -1, :] += bottom
    left = d[:, :, :, :p].sum(axis=3)
    right = d[:, :, :, p + w :].sum(axis=3)
    d = d[:, :, :, p : p + w].copy()
    d[:, :, :, 0] += left
    d[:, :, :, -1] += right
    return d


def upsample_nearest2x(x: Tensor) -> Tensor:
    out = x.data.repeat(2, axis=-2).repeat(2, axis=-1)

    def bw(g):
        s = g.shape
        blocks = g.reshape(*s[:-2], s[-2] // 2, 2, s[-1] // 2, 2)
        return (blocks.sum(axis=(-3, -1)),)

    return _make(out, (x,), bw, "upsample2x")


def bilinear_warp(source, flow: Tensor) -> Tensor:
    """Sample ``source`` at ``(x + flow[0], y + flow[1])`` with bilinear weights.

    x is the column index, y the row index. Sample coordinates are clamped
    to the image, so out-of-range flow reads the border.
    """
    source = _as_tensor(source, flow.dtype)
    if flow.ndim != source.ndim or flow.shape[-3] != 2 or flow.shape[-2:] != source.shape[-2:]:
        raise ShapeError(
            "flow must be [2,H,W] matching the source", source=list(source.shape), flow=list(flow.shape)
        )
    squeeze = source.ndim == 3
    src = _batched(source.data)
    fl = _batched(flow.data).astype(src.dtype, copy=False)
    n, c, h, w = src.shape
    ys, xs = np.meshgrid(np.arange(h, dtype=src.dtype), np.arange(w, dtype=src.dtype), indexing="ij")
    sx_raw = xs + fl[:, 0]
    sy_raw = ys + fl[:, 1]
    sx = np.clip(sx_raw, 0, w - 1)
    sy = np.clip(sy_raw, 0, h - 1)
    # non-finite flow reads pixel 0 for indexing; the weights still carry the NaN
    x0 = np.floor(np.nan_to_num(sx)).astype(np.int64)
    y0 = np.floor(np.nan_to_num(sy)).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    wx = (sx - x0)[:, None]
    wy = (sy - y0)[:, None]

    flat = src.reshape(n, c, h * w)

    def gather(yi, xi):
        idx = (yi * w + xi).reshape(n, 1, h * w)
        return np.take_along_axis(flat, np.broadcast_to(idx, (n, c, h * w)), axis=2).reshape(n, c, h, w)

    v00, v01 = gather(y0, x0), gather(y0, x1)
    v10, v11 = gather(y1, x0), gather(y1, x1)
    out = (1 - wx) * (1 - wy) * v00 + wx * (1 - wy) * v01 + (1 - wx) * wy * v10 + wx * wy * v11
    if squeeze:
        out = out[0]

    def bw(g):
        g4 = _batched(g)
        gsrc = gflow = None
        if source.requires_grad:
            base = (np.arange(n * c) * (h * w)).reshape(n, c, 1, 1)
            idx = []
            wts = []
            for yi, xi, wt in (
                (y0, x0, (1 - wx) * (1 - wy)),
                (y0, x1, wx * (1 - wy)),
                (y1, x0, (1 - wx) * wy),
                (y1, x1, wx * wy),
            ):
                idx.append((base + (yi * w + xi)[:, None]).ravel())
                wts.append((g4 * wt).ravel())
            gsrc = np.bincount(np.concatenate(idx), weights=np.concatenate(wts), minlength=n * c * h * w)
            gsrc = gsrc.reshape(src.shape).astype(src.dtype)
            if squeeze:
                gsrc = gsrc[0]
        if flow.requires_grad:
            dx = ((1 - wy) * (v01 - v00) + wy * (v11 - v10)) * g4
            dy = ((1 - wx) * (v10 - v00) + wx * (v11 - v01)) * g4
            in_x = (sx_raw >= 0) & (sx_raw <= w - 1)
            in_y = (sy_raw >= 0) & (sy_raw <= h - 1)
            gflow = np.stack([dx.sum(axis=1) * in_x, dy.sum(axis=1) * in_y], axis=1).astype(fl.dtype)
            if squeeze:
                gflow = gflow[0]
        return gsrc, gflow

    return _make(out, (source, flow), bw, "bilinear_warp")


# -- gradient checking -------------------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_error: float
    tol: float
    n_checked: int

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_error <= self.tol)


def _rel_errors(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    # coordinates whose gradient is tiny relative to the largest one are
    # judged against that scale instead of their own magnitude
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0))
    floor = 1e-3 * scale + 1e-10
    return np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)


def _scalar(f, t: Tensor) -> Tensor:
    out = f(t)
    if out.data.size != 1:
        raise ShapeError("gradient check needs a scalar-valued function", shape=list(out.shape))
    return out


def grad_check(f: Callable[[Tensor], Tensor], point, eps: float = 1e-3, tol: float = 1e-4) -> GradCheckReport:
    """Compare backprop gradients of scalar ``f`` against central differences."""
    x0 = np.array(point.data if isinstance(point, Tensor) else point, dtype=np.float64)
    x = Tensor(x0.copy(), requires_grad=True)
    out = _scalar(f, x)
    backward(out)
    analytic = x.grad if x.grad is not None else np.zeros_like(x0)

    numeric = np.zeros_like(x0)
    flat = numeric.reshape(-1)
    probe = x0.copy()
    pflat = probe.reshape(-1)
    for i in range(pflat.size):
        orig = pflat[i]
        pflat[i] = orig + eps
        fp = float(_scalar(f, Tensor(probe)).data.reshape(-1)[0])
        pflat[i] = orig - eps
        fm = float(_scalar(f, Tensor(probe)).data.reshape(-1)[0])
        pflat[i] = orig
        flat[i] = (fp - fm) / (2 * eps)
    err = _rel_errors(analytic, numeric)
    return GradCheckReport(float(err.max(initial=0.0)), tol, int(x0.size))


def directional_grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-3,
    tol: float = 1e-4,
    n_directions: int = 4,
    seed: int = 0,
) -> GradCheckReport:
    """Check Jacobian-vector products along random directions.

    ``f`` takes no arguments and reads ``params`` (modified in place), which
    makes it practical for networks with many weights.
    """
    for p in params:
        p.grad = None
    out = f()
    if out.data.size != 1:
        raise ShapeError("gradient check needs a scalar-valued function", shape=list(out.shape))
    backward(out)
    grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
    rng = np.random.default_rng(seed)
    analytic, numeric = [], []
    for _ in range(n_directions):
        dirs = [rng.standard_normal(p.shape) for p in params]
        norm = np.sqrt(sum(float((d * d).sum()) for d in dirs))
        dirs = [d / norm for d in dirs]
        analytic.append(sum(float((g * d).sum()) for g, d in zip(grads, dirs)))
        base = [p.data.copy() for p in params]
        for p, b, d in zip(params, base, dirs):
            p.data = b + eps * d
        fp = float(f().data.reshape(-1)[0])
        for p, b, d in zip(params, base, dirs):
            p.data = b - eps * d
        fm = float(f().data.reshape(-1)[0])
        for p, b in zip(params, base):
            p.data = b
        numeric.append((fp - fm) / (2 * eps))
    a, nm = np.array(analytic), np.array(numeric)
    err = np.abs(a - nm) / np.maximum(np.maximum(np.abs(a), np.abs(nm)), 1e-10)
    return GradCheckReport(float(err.max()), tol, n_directions)
