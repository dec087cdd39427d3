"""Reverse-mode automatic differentiation on numpy arrays.

A ``Tensor`` wraps an ``ndarray`` plus an optional gradient. Operations
build a DAG of closures; ``Tensor.backward()`` walks it once in reverse
topological order and accumulates ``grad`` on every node that requires
it. The engine is deliberately small: only the operations the flow
model needs exist, and each one validates its shapes eagerly so errors
surface at the call site rather than deep inside a backward pass.

Precision is a process-wide default (32 or 64 bit) plus a context
manager for local overrides. Mixed-precision arithmetic is rejected:
silently upcasting float32 parameters against float64 constants is a
bug far more often than a feature.

Broadcasting is restricted to leading unit extents (after ranks are
aligned on the left). Anything fancier must go through ``expand``,
which makes the replication explicit and keeps every backward rule a
plain sum over known axes.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError

_DTYPES = {32: np.float32, 64: np.float64}
_default_dtype = np.float32
_grad_enabled = True


def set_default_dtype(bits: int) -> None:
    """Set the process-wide float width for newly created tensors."""
    if bits not in _DTYPES:
        raise ContractError(f"precision must be 32 or 64, got {bits}")
    global _default_dtype
    _default_dtype = _DTYPES[bits]


def get_default_dtype() -> np.dtype:
    return np.dtype(_default_dtype)


@contextlib.contextmanager
def precision(bits: int):
    """Temporarily switch the default float width."""
    if bits not in _DTYPES:
        raise ContractError(f"precision must be 32 or 64, got {bits}")
    global _default_dtype
    prev = _default_dtype
    _default_dtype = _DTYPES[bits]
    try:
        yield
    finally:
        _default_dtype = prev


@contextlib.contextmanager
def no_grad():
    """Disable graph construction; forward values only."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _broadcast_shape(sa: tuple, sb: tuple) -> tuple:
    """Common shape of two operands under the leading-unit rule."""
    rank = max(len(sa), len(sb))
    aa = (1,) * (rank - len(sa)) + sa
    ab = (1,) * (rank - len(sb)) + sb
    out = []
    for da, db in zip(aa, ab):
        if da == db or db == 1:
            out.append(da)
        elif da == 1:
            out.append(db)
        else:
            raise DimensionError(f"cannot broadcast shapes {sa} and {sb}")
    out = tuple(out)
    for aligned in (aa, ab):
        bcast = [i for i in range(rank) if aligned[i] != out[i]]
        if bcast != list(range(len(bcast))):
            raise DimensionError(
                f"broadcast is limited to leading unit extents: {sa} vs {sb}"
            )
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a gradient back to the original operand shape."""
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    aligned = (1,) * lead + shape
    axes = tuple(i for i in range(g.ndim) if aligned[i] == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


class Tensor:
    """An ndarray with an optional gradient and a backward closure."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_done")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.asarray(data, dtype=dtype or _default_dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad) and _grad_enabled
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._done = False

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: Sequence["Tensor"],
                 backward: Callable[[np.ndarray], None]) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out._done = False
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{flag})"

    # -- gradient machinery --------------------------------------------------

    def _accum(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = g.copy() if isinstance(g, np.ndarray) else np.asarray(g)
        else:
            self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into every reachable ``grad``.

        Only scalar roots are accepted; a second call on the same root
        is a contract error because the closures have been consumed.
        """
        if self.data.size != 1:
            raise ContractError(
                f"backward() requires a scalar root, got shape {self.shape}"
            )
        if not self.requires_grad:
            raise ContractError("backward() on a tensor that requires no grad")
        if self._done:
            raise ContractError("second backward() without rebuilding the graph")
        self._done = True

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, Iterable[Tensor]]] = [(self, iter(self._parents))]
        seen.add(id(self))
        while stack:
            node, it = stack[-1]
            nxt = next(it, None)
            if nxt is None:
                order.append(node)
                stack.pop()
            elif id(nxt) not in seen and nxt.requires_grad:
                seen.add(id(nxt))
                stack.append((nxt, iter(nxt._parents)))

        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None:
                node._backward(node.grad)

    # -- operator sugar ------------------------------------------------------

    def _coerce(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            if other.data.dtype != self.data.dtype:
                raise ContractError(
                    f"dtype mismatch: {self.data.dtype} vs {other.data.dtype}"
                )
            return other
        return Tensor(np.asarray(other, dtype=self.data.dtype))

    def __add__(self, other):
        return add(self, self._coerce(other))

    def __radd__(self, other):
        return add(self._coerce(other), self)

    def __sub__(self, other):
        return add(self, scale(self._coerce(other), -1.0))

    def __rsub__(self, other):
        return add(self._coerce(other), scale(self, -1.0))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, self._coerce(other))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, shape):
        return reshape(self, shape)

    def transpose(self, axes=None):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype or _default_dtype))


def _check_same_dtype(*ts: Tensor) -> None:
    d0 = ts[0].data.dtype
    for t in ts[1:]:
        if t.data.dtype != d0:
            raise ContractError(f"dtype mismatch: {d0} vs {t.data.dtype}")


# -- elementwise and structural ops ------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b, a)
    _check_same_dtype(a, b)
    _broadcast_shape(a.shape, b.shape)
    out_data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g, b.shape))

    return Tensor._from_op(out_data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b, a)
    _check_same_dtype(a, b)
    _broadcast_shape(a.shape, b.shape)
    out_data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g * a.data, b.shape))

    return Tensor._from_op(out_data, (a, b), backward)


def scale(x: Tensor, s: float) -> Tensor:
    x = _as_tensor(x)
    s = float(s)
    out_data = x.data * s

    def backward(g):
        if x.requires_grad:
            x._accum(g * s)

    return Tensor._from_op(out_data, (x,), backward)


def relu(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    out_data = np.maximum(x.data, 0)

    def backward(g):
        if x.requires_grad:
            x._accum(g * (x.data > 0))

    return Tensor._from_op(out_data, (x,), backward)


def sigmoid(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    d = x.data
    # split on sign so exp never overflows
    out_data = np.where(d >= 0, 1.0 / (1.0 + np.exp(-np.abs(d))),
                        np.exp(-np.abs(d)) / (1.0 + np.exp(-np.abs(d))))
    out_data = out_data.astype(d.dtype, copy=False)

    def backward(g):
        if x.requires_grad:
            x._accum(g * out_data * (1.0 - out_data))

    return Tensor._from_op(out_data, (x,), backward)


def tanh(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    out_data = np.tanh(x.data)

    def backward(g):
        if x.requires_grad:
            x._accum(g * (1.0 - out_data * out_data))

    return Tensor._from_op(out_data, (x,), backward)


def absolute(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    out_data = np.abs(x.data)

    def backward(g):
        if x.requires_grad:
            x._accum(g * np.sign(x.data))

    return Tensor._from_op(out_data, (x,), backward)


def _norm_axes(axis, ndim: int) -> tuple:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    axes = tuple(a % ndim for a in axis)
    if len(set(axes)) != len(axes):
        raise ContractError(f"duplicate axes in {axis}")
    for a in axes:
        if not 0 <= a < ndim:
            raise DimensionError(f"axis {a} out of range for rank {ndim}")
    return axes


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    axes = _norm_axes(axis, x.data.ndim)
    out_data = x.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if x.requires_grad:
            gg = g
            if not keepdims:
                for a in sorted(axes):
                    gg = np.expand_dims(gg, a)
            x._accum(np.broadcast_to(gg, x.shape))

    return Tensor._from_op(out_data, (x,), backward)


def tmean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    axes = _norm_axes(axis, x.data.ndim)
    count = 1
    for a in axes:
        count *= x.shape[a]
    out_data = x.data.mean(axis=axes, keepdims=keepdims)

    def backward(g):
        if x.requires_grad:
            gg = g
            if not keepdims:
                for a in sorted(axes):
                    gg = np.expand_dims(gg, a)
            x._accum(np.broadcast_to(gg, x.shape) / count)

    return Tensor._from_op(out_data, (x,), backward)


def reshape(x: Tensor, shape) -> Tensor:
    x = _as_tensor(x)
    shape = tuple(shape)
    try:
        out_data = x.data.reshape(shape)
    except ValueError as e:
        raise DimensionError(f"cannot reshape {x.shape} to {shape}: {e}") from None

    def backward(g):
        if x.requires_grad:
            x._accum(g.reshape(x.shape))

    return Tensor._from_op(out_data, (x,), backward)


def transpose(x: Tensor, axes=None) -> Tensor:
    x = _as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.data.ndim)))
    axes = tuple(axes)
    out_data = np.transpose(x.data, axes)
    inv = np.argsort(axes)

    def backward(g):
        if x.requires_grad:
            x._accum(np.transpose(g, inv))

    return Tensor._from_op(out_data, (x,), backward)


def expand(x: Tensor, shape) -> Tensor:
    """Explicitly replicate unit extents up to ``shape``.

    The backward rule sums over every replicated axis, which is why
    general broadcasting is funnelled through this op.
    """
    x = _as_tensor(x)
    shape = tuple(shape)
    if len(shape) < x.data.ndim:
        raise DimensionError(f"expand target {shape} has lower rank than {x.shape}")
    lead = len(shape) - x.data.ndim
    aligned = (1,) * lead + x.shape
    for i, (src, dst) in enumerate(zip(aligned, shape)):
        if src != dst and src != 1:
            raise DimensionError(f"cannot expand {x.shape} to {shape} (axis {i})")
    out_data = np.broadcast_to(x.data.reshape(aligned), shape).copy()
    axes = tuple(i for i in range(len(shape)) if aligned[i] == 1 and shape[i] != 1)

    def backward(g):
        if x.requires_grad:
            gg = g.sum(axis=axes, keepdims=True) if axes else g
            x._accum(gg.reshape(x.shape))

    return Tensor._from_op(out_data, (x,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    if not ts:
        raise ContractError("concat of an empty sequence")
    _check_same_dtype(*ts)
    ndim = ts[0].data.ndim
    axis = axis % ndim
    for t in ts[1:]:
        if t.data.ndim != ndim:
            raise DimensionError(f"concat rank mismatch: {ts[0].shape} vs {t.shape}")
        for a in range(ndim):
            if a != axis and t.shape[a] != ts[0].shape[a]:
                raise DimensionError(
                    f"concat extent mismatch on axis {a}: {ts[0].shape} vs {t.shape}"
                )
    out_data = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.shape[axis] for t in ts]

    def backward(g):
        start = 0
        for t, size in zip(ts, sizes):
            if t.requires_grad:
                idx = [slice(None)] * ndim
                idx[axis] = slice(start, start + size)
                t._accum(g[tuple(idx)])
            start += size

    return Tensor._from_op(out_data, tuple(ts), backward)


# -- linear algebra ----------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b, a)
    _check_same_dtype(a, b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError(
            f"matmul needs rank-2 operands, got {a.shape} and {b.shape}"
        )
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} x {b.shape}")
    out_data = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            a._accum(g @ b.data.T)
        if b.requires_grad:
            b._accum(a.data.T @ g)

    return Tensor._from_op(out_data, (a, b), backward)


def softmax(x: Tensor, axis: int) -> Tensor:
    x = _as_tensor(x)
    axis = axis % x.data.ndim
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        if x.requires_grad:
            dot = (g * out_data).sum(axis=axis, keepdims=True)
            x._accum(out_data * (g - dot))

    return Tensor._from_op(out_data, (x,), backward)


def l2_normalize(x: Tensor, axis: int = 0, eps: float = 1e-12) -> Tensor:
    """x / max(||x||_2, eps) along one axis."""
    x = _as_tensor(x)
    if eps <= 0:
        raise ContractError(f"eps must be positive, got {eps}")
    axis = axis % x.data.ndim
    norm = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    denom = np.maximum(norm, eps)
    out_data = x.data / denom

    def backward(g):
        if x.requires_grad:
            dot = (g * x.data).sum(axis=axis, keepdims=True)
            live = (norm > eps)
            safe = np.where(live, norm, 1.0)
            x._accum(g / denom - np.where(live, x.data * dot / (safe * denom * denom), 0.0))

    return Tensor._from_op(out_data, (x,), backward)


# -- convolution and pooling -------------------------------------------------


def conv2d(x: Tensor, w: Tensor, bias: Tensor | None = None, *,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of one (C_in, H, W) map with (C_out, C_in, k, k).

    Output extents use floor semantics: (H + 2p - k)//stride + 1. The
    forward runs as im2col plus one GEMM; the input gradient re-scatters
    the column gradient with k*k strided slice additions.
    """
    x, w = _as_tensor(x), _as_tensor(w)
    _check_same_dtype(x, w)
    if x.data.ndim != 3:
        raise DimensionError(f"conv2d input must be (C,H,W), got {x.shape}")
    if w.data.ndim != 4:
        raise DimensionError(f"conv2d weight must be (O,I,k,k), got {w.shape}")
    cout, cin, kh, kw = w.shape
    if kh != kw:
        raise DimensionError(f"conv2d kernel must be square, got {kh}x{kw}")
    if kh % 2 != 1:
        raise DimensionError(f"conv2d kernel extent must be odd, got {kh}")
    if cin != x.shape[0]:
        raise DimensionError(
            f"conv2d channel mismatch: input {x.shape} vs weight {w.shape}"
        )
    if stride < 1 or padding < 0:
        raise ContractError(f"bad stride/padding: {stride}/{padding}")
    if bias is not None:
        bias = _as_tensor(bias)
        _check_same_dtype(x, bias)
        if bias.shape != (cout,):
            raise DimensionError(f"conv2d bias must be ({cout},), got {bias.shape}")

    _, h, wd = x.shape
    hp, wp = h + 2 * padding, wd + 2 * padding
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    if ho <= 0 or wo <= 0:
        raise DimensionError(
            f"conv2d output would be empty for input {x.shape}, "
            f"kernel {kh}, stride {stride}, padding {padding}"
        )

    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    win = win[:, ::stride, ::stride]                      # (C_in, ho, wo, k, k)
    cols = win.transpose(0, 3, 4, 1, 2).reshape(cin * kh * kw, ho * wo)
    wm = w.data.reshape(cout, cin * kh * kw)
    out = wm @ cols
    if bias is not None:
        out = out + bias.data[:, None]
    out_data = out.reshape(cout, ho, wo)
    parents = (x, w) if bias is None else (x, w, bias)

    def backward(g):
        gm = g.reshape(cout, ho * wo)
        if w.requires_grad:
            w._accum((gm @ cols.T).reshape(w.shape))
        if bias is not None and bias.requires_grad:
            bias._accum(gm.sum(axis=1))
        if x.requires_grad:
            dcols = wm.T @ gm
            dwin = dcols.reshape(cin, kh, kw, ho, wo)
            dxp = np.zeros_like(xp)
            for ki in range(kh):
                for kj in range(kw):
                    dxp[:, ki:ki + stride * ho:stride,
                        kj:kj + stride * wo:stride] += dwin[:, ki, kj]
            if padding:
                x._accum(dxp[:, padding:padding + h, padding:padding + wd])
            else:
                x._accum(dxp)

    return Tensor._from_op(out_data, parents, backward)


def avg_pool2x2(x: Tensor) -> Tensor:
    """2x2 stride-2 average pooling with ceil extents.

    Edge windows that fall off the map average only the cells that
    exist, so a constant input stays constant at every level.
    """
    x = _as_tensor(x)
    if x.data.ndim != 3:
        raise DimensionError(f"avg_pool2x2 input must be (C,H,W), got {x.shape}")
    c, h, wd = x.shape
    ho, wo = (h + 1) // 2, (wd + 1) // 2
    hp, wp = 2 * ho, 2 * wo
    xp = np.pad(x.data, ((0, 0), (0, hp - h), (0, wp - wd)))
    sums = xp[:, 0::2] + xp[:, 1::2]
    sums = sums[:, :, 0::2] + sums[:, :, 1::2]
    cy = np.full(ho, 2.0, dtype=x.data.dtype)
    cx = np.full(wo, 2.0, dtype=x.data.dtype)
    if h % 2:
        cy[-1] = 1.0
    if wd % 2:
        cx[-1] = 1.0
    counts = cy[:, None] * cx[None, :]
    out_data = sums / counts

    def backward(g):
        if x.requires_grad:
            gd = g / counts
            dxp = np.zeros_like(xp)
            for oi in (0, 1):
                for oj in (0, 1):
                    dxp[:, oi::2, oj::2] = gd
            x._accum(dxp[:, :h, :wd])

    return Tensor._from_op(out_data, (x,), backward)


# -- sampling ----------------------------------------------------------------


def _corner_gather(data, yi, xi, h, w):
    """Gather with zero padding; returns (values, validity mask)."""
    valid = (yi >= 0) & (yi < h) & (xi >= 0) & (xi < w)
    yc = np.clip(yi, 0, h - 1)
    xc = np.clip(xi, 0, w - 1)
    return data[..., yc, xc] * valid, valid


def bilinear_sample(x: Tensor, coords: Tensor) -> Tensor:
    """Sample (C, H, W) at real-valued positions, zero outside the map.

    ``coords`` is (2, Ho, Wo) with coords[0] the horizontal (x) position
    and coords[1] the vertical (y) position. Differentiable in both the
    map and the coordinates.
    """
    x, coords = _as_tensor(x), _as_tensor(coords)
    _check_same_dtype(x, coords)
    if x.data.ndim != 3:
        raise DimensionError(f"bilinear_sample input must be (C,H,W), got {x.shape}")
    if coords.data.ndim != 3 or coords.shape[0] != 2:
        raise DimensionError(
            f"coords must be (2,Ho,Wo), got {coords.shape}"
        )
    c, h, w = x.shape
    cx, cy = coords.data[0], coords.data[1]
    x0 = np.floor(cx).astype(np.int64)
    y0 = np.floor(cy).astype(np.int64)
    fx, fy = cx - x0, cy - y0
    corners = []
    for dy in (0, 1):
        for dx in (0, 1):
            wgt = (fx if dx else 1.0 - fx) * (fy if dy else 1.0 - fy)
            val, msk = _corner_gather(x.data, y0 + dy, x0 + dx, h, w)
            corners.append((wgt, val, msk))
    out_data = corners[0][1] * corners[0][0]
    for wgt, val, _ in corners[1:]:
        out_data = out_data + val * wgt
    out_data = out_data.astype(x.data.dtype, copy=False)

    def backward(g):
        if x.requires_grad:
            idx_parts, wgt_parts = [], []
            for (wgt, _, msk), (dy, dx) in zip(corners, ((0, 0), (0, 1), (1, 0), (1, 1))):
                yc = np.clip(y0 + dy, 0, h - 1)
                xc = np.clip(x0 + dx, 0, w - 1)
                lin = (yc * w + xc).ravel()
                contrib = (g * wgt * msk).reshape(c, -1)
                idx_parts.append(np.broadcast_to(lin, (c, lin.size))
                                 + (np.arange(c) * h * w)[:, None])
                wgt_parts.append(contrib)
            flat_idx = np.concatenate([p.ravel() for p in idx_parts])
            flat_val = np.concatenate([p.ravel() for p in wgt_parts])
            acc = np.bincount(flat_idx, weights=flat_val, minlength=c * h * w)
            x._accum(acc.reshape(c, h, w).astype(x.data.dtype, copy=False))
        if coords.requires_grad:
            (_, v00, _), (_, v01, _), (_, v10, _), (_, v11, _) = corners
            dout_dx = (1.0 - fy) * (v01 - v00) + fy * (v11 - v10)
            dout_dy = (1.0 - fx) * (v10 - v00) + fx * (v11 - v01)
            gc = np.stack([(g * dout_dx).sum(axis=0), (g * dout_dy).sum(axis=0)])
            coords._accum(gc.astype(coords.data.dtype, copy=False))

    return Tensor._from_op(out_data, (x, coords), backward)


def batched_sample(vol: Tensor, coords: Tensor) -> Tensor:
    """Per-slice bilinear gather: (N, H, W) sampled at (2, N, S) -> (N, S).

    Slice n of the volume is only read at coords[:, n, :]; everything
    outside the map reads as zero. Used to look windows of a cost
    volume up around per-pixel centers.
    """
    vol, coords = _as_tensor(vol), _as_tensor(coords)
    _check_same_dtype(vol, coords)
    if vol.data.ndim != 3:
        raise DimensionError(f"batched_sample volume must be (N,H,W), got {vol.shape}")
    if coords.data.ndim != 3 or coords.shape[0] != 2:
        raise DimensionError(f"coords must be (2,N,S), got {coords.shape}")
    if coords.shape[1] != vol.shape[0]:
        raise DimensionError(
            f"coords slice count {coords.shape[1]} != volume slices {vol.shape[0]}"
        )
    n, h, w = vol.shape
    s = coords.shape[2]
    rows = np.arange(n)[:, None]
    cx, cy = coords.data[0], coords.data[1]
    x0 = np.floor(cx).astype(np.int64)
    y0 = np.floor(cy).astype(np.int64)
    fx, fy = cx - x0, cy - y0
    corners = []
    for dy in (0, 1):
        for dx in (0, 1):
            yi, xi = y0 + dy, x0 + dx
            valid = (yi >= 0) & (yi < h) & (xi >= 0) & (xi < w)
            yc = np.clip(yi, 0, h - 1)
            xc = np.clip(xi, 0, w - 1)
            wgt = (fx if dx else 1.0 - fx) * (fy if dy else 1.0 - fy)
            val = vol.data[rows, yc, xc] * valid
            corners.append((wgt, val, valid, yc, xc))
    out_data = corners[0][0] * corners[0][1]
    for wgt, val, _, _, _ in corners[1:]:
        out_data = out_data + wgt * val
    out_data = out_data.astype(vol.data.dtype, copy=False)

    def backward(g):
        if vol.requires_grad:
            idx_parts, val_parts = [], []
            base = (np.arange(n) * h * w)[:, None]
            for wgt, _, valid, yc, xc in corners:
                idx_parts.append((base + yc * w + xc).ravel())
                val_parts.append((g * wgt * valid).ravel())
            acc = np.bincount(np.concatenate(idx_parts),
                              weights=np.concatenate(val_parts),
                              minlength=n * h * w)
            vol._accum(acc.reshape(n, h, w).astype(vol.data.dtype, copy=False))
        if coords.requires_grad:
            (_, v00, _, _, _), (_, v01, _, _, _) = corners[0], corners[1]
            (_, v10, _, _, _), (_, v11, _, _, _) = corners[2], corners[3]
            dout_dx = (1.0 - fy) * (v01 - v00) + fy * (v11 - v10)
            dout_dy = (1.0 - fx) * (v10 - v00) + fx * (v11 - v01)
            gc = np.stack([g * dout_dx, g * dout_dy])
            coords._accum(gc.astype(coords.data.dtype, copy=False))

    return Tensor._from_op(out_data, (vol, coords), backward)


def zero_grads(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None
