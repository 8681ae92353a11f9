"""Dense tensors with reverse-mode differentiation on numpy storage.

The value types are deliberately small: rank-4 arrays in (batch, channel,
height, width) layout for feature maps, rank-2 arrays for attention
matrices, rank-1 arrays for biases and norm parameters.  Every operation
records a backward closure on the tensor it produces; ``Tensor.backward``
walks the recorded graph once in reverse topological order and accumulates
gradients on the leaves.  ``grad_check`` compares those gradients against
central finite differences, which is the ground truth everything else in
this package is tested against.

Forward passes that never call ``backward`` should run inside ``no_grad()``
so no graph is recorded.
"""

from __future__ import annotations

import math
import threading
from contextlib import contextmanager
from functools import lru_cache

import numpy as np

__all__ = [
    "Tensor",
    "no_grad",
    "zero_grads",
    "cast",
    "matmul",
    "transpose",
    "softmax_rows",
    "concat",
    "chunk",
    "pad_reflect",
    "conv2d",
    "depthwise_conv2d",
    "avgpool2d",
    "upsample2x",
    "activation",
    "grad_check",
    "grad_check_params",
]

_FLOAT_TYPES = (np.float32, np.float64)

_state = threading.local()


def _recording() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording for the duration of the block."""
    prev = _recording()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Tensor:
    """A numpy array plus the bookkeeping reverse mode needs.

    ``data`` is always a contiguous float32 or float64 array.  ``grad``
    holds the accumulated gradient after ``backward`` and has the same
    shape and dtype as ``data``.  Tensors made by an op keep references
    to their parents and a closure mapping the output gradient to parent
    gradients; leaf tensors have neither.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.ascontiguousarray(data)
        if arr.dtype not in _FLOAT_TYPES:
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents: tuple = ()
        self._vjp = None

    # -- introspection ----------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

    # -- graph construction ------------------------------------------------

    @staticmethod
    def _op(data, parents, vjp):
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        if _recording() and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._vjp = vjp
        else:
            out.requires_grad = False
            out._parents = ()
            out._vjp = None
        return out

    def backward(self):
        """Accumulate gradients of this scalar onto every reachable leaf."""
        if self.data.size != 1:
            raise ValueError(f"backward needs a scalar, got shape {self.data.shape}")
        if not self.requires_grad:
            raise ValueError("backward on a tensor that requires no gradient")

        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._vjp is None or node.grad is None:
                continue
            grads = node._vjp(node.grad)
            for parent, g in zip(node._parents, grads):
                if g is None or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    parent.grad = g
                else:
                    parent.grad = parent.grad + g

    # -- elementwise arithmetic ---------------------------------------------

    def _coerce(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=self.data.dtype))

    def __add__(self, other):
        other = self._coerce(other)
        a, b = self, other
        out = a.data + b.data

        def vjp(g):
            return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

        return Tensor._op(out, (a, b), vjp)

    __radd__ = __add__

    def __neg__(self):
        out = -self.data
        return Tensor._op(out, (self,), lambda g: (-g,))

    def __sub__(self, other):
        other = self._coerce(other)
        a, b = self, other
        out = a.data - b.data

        def vjp(g):
            return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

        return Tensor._op(out, (a, b), vjp)

    def __rsub__(self, other):
        return self._coerce(other).__sub__(self)

    def __mul__(self, other):
        other = self._coerce(other)
        a, b = self, other
        out = a.data * b.data

        def vjp(g):
            ga = _unbroadcast(g * b.data, a.data.shape) if a.requires_grad else None
            gb = _unbroadcast(g * a.data, b.data.shape) if b.requires_grad else None
            return ga, gb

        return Tensor._op(out, (a, b), vjp)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = self._coerce(other)
        a, b = self, other
        out = a.data / b.data

        def vjp(g):
            ga = _unbroadcast(g / b.data, a.data.shape) if a.requires_grad else None
            gb = _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape) if b.requires_grad else None
            return ga, gb

        return Tensor._op(out, (a, b), vjp)

    def __rtruediv__(self, other):
        return self._coerce(other).__truediv__(self)

    # -- shape and reductions ------------------------------------------------

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.data.shape
        n_new = int(np.prod(shape)) if shape else 1
        if n_new != self.data.size:
            raise ValueError(f"reshape {old} -> {shape} changes element count")
        out = self.data.reshape(shape)
        return Tensor._op(np.ascontiguousarray(out), (self,), lambda g: (g.reshape(old),))

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        shape = self.data.shape
        out = self.data.sum(axis=axis, keepdims=keepdims)
        out = np.asarray(out)

        def vjp(g):
            return (_spread(g, shape, axis, keepdims),)

        return Tensor._op(out, (self,), vjp)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        shape = self.data.shape
        denom = self.data.size if axis is None else int(
            np.prod([shape[a] for a in _axes_tuple(axis, self.data.ndim)])
        )
        out = np.asarray(self.data.mean(axis=axis, keepdims=keepdims))

        def vjp(g):
            return (_spread(g, shape, axis, keepdims) / denom,)

        return Tensor._op(out, (self,), vjp)

    def abs(self) -> "Tensor":
        d = self.data
        out = np.abs(d)
        return Tensor._op(out, (self,), lambda g: (g * np.sign(d),))

    def sqrt(self) -> "Tensor":
        out = np.sqrt(self.data)
        return Tensor._op(out, (self,), lambda g: (g * (0.5 / out),))


def _axes_tuple(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        return (axis % ndim,)
    return tuple(a % ndim for a in axis)


def _spread(g, shape, axis, keepdims):
    """Broadcast a reduced gradient back to the pre-reduction shape."""
    if axis is None:
        return np.broadcast_to(g, shape).astype(g.dtype, copy=True)
    if not keepdims:
        kept = list(shape)
        for a in _axes_tuple(axis, len(shape)):
            kept[a] = 1
        g = g.reshape(kept)
    return np.broadcast_to(g, shape).astype(g.dtype, copy=True)


def _unbroadcast(g, shape):
    """Sum a gradient over the axes numpy broadcasting introduced."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def zero_grads(tensors) -> None:
    for t in tensors:
        t.grad = None


# -- matrix ops -------------------------------------------------------------


def cast(x: Tensor, dtype) -> Tensor:
    """Change dtype; the adjoint casts gradients back to the source dtype."""
    dt = np.dtype(dtype)
    if x.data.dtype == dt:
        return x
    src = x.data.dtype

    def vjp(g):
        return (g.astype(src, copy=False),)

    return Tensor._op(x.data.astype(dt), (x,), vjp)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Plain 2-D matrix product."""
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError(f"matmul wants rank-2 operands, got {a.data.shape} and {b.data.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ValueError(f"matmul inner dims differ: {a.data.shape} @ {b.data.shape}")
    ad, bd = a.data, b.data
    out = ad @ bd

    def vjp(g):
        ga = g @ bd.T if a.requires_grad else None
        gb = ad.T @ g if b.requires_grad else None
        return ga, gb

    return Tensor._op(out, (a, b), vjp)


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ValueError(f"transpose wants a rank-2 tensor, got {a.data.shape}")
    out = np.ascontiguousarray(a.data.T)
    return Tensor._op(out, (a,), lambda g: (np.ascontiguousarray(g.T),))


def softmax_rows(m: Tensor) -> Tensor:
    """Row-normalized softmax of a matrix; every output row sums to 1."""
    if m.data.ndim != 2:
        raise ValueError(f"softmax_rows wants a rank-2 tensor, got {m.data.shape}")
    if not np.isfinite(m.data).all():
        raise ValueError("softmax_rows input has non-finite entries")
    z = m.data - m.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=1, keepdims=True)

    def vjp(g):
        dot = (g * y).sum(axis=1, keepdims=True)
        return (y * (g - dot),)

    return Tensor._op(y, (m,), vjp)


# -- layout ops ---------------------------------------------------------------


def concat(xs, axis: int = 1) -> Tensor:
    """Concatenate tensors along `axis` (channels by default)."""
    xs = list(xs)
    if not xs:
        raise ValueError("concat of an empty list")
    sizes = [x.data.shape[axis] for x in xs]
    out = np.concatenate([x.data for x in xs], axis=axis)
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        grads = []
        for x, lo, hi in zip(xs, offsets[:-1], offsets[1:]):
            if x.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                grads.append(np.ascontiguousarray(g[tuple(idx)]))
            else:
                grads.append(None)
        return tuple(grads)

    return Tensor._op(out, tuple(xs), vjp)


def chunk(x: Tensor, groups: int, axis: int = 1) -> list:
    """Split a tensor into `groups` equal slices along `axis`."""
    n = x.data.shape[axis]
    if n % groups != 0:
        raise ValueError(f"chunk: axis size {n} not divisible by {groups}")
    step = n // groups
    pieces = []
    for i in range(groups):
        pieces.append(_narrow(x, axis, i * step, step))
    return pieces


def _narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    idx = [slice(None)] * x.data.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    out = np.ascontiguousarray(x.data[idx])
    shape = x.data.shape

    def vjp(g):
        gx = np.zeros(shape, dtype=g.dtype)
        gx[idx] = g
        return (gx,)

    return Tensor._op(out, (x,), vjp)


# -- padding, convolution, pooling --------------------------------------------


def _pad_pair(p) -> tuple:
    if isinstance(p, tuple):
        return p
    return (p, p)


def pad_reflect(x: Tensor, ph, pw) -> Tensor:
    """Reflect-pad the two trailing axes; ph and pw are either a single
    per-side amount or a (before, after) pair."""
    if x.data.ndim != 4:
        raise ValueError(f"pad_reflect wants a rank-4 tensor, got {x.data.shape}")
    pt, pb = _pad_pair(ph)
    pl, pr = _pad_pair(pw)
    if pt == pb == pl == pr == 0:
        return x
    n, c, h, w = x.data.shape
    if max(pt, pb) >= h or max(pl, pr) >= w:
        raise ValueError(
            f"reflect pad ({pt},{pb},{pl},{pr}) too large for spatial dims ({h}, {w})")
    out = np.pad(x.data, ((0, 0), (0, 0), (pt, pb), (pl, pr)), mode="reflect")

    def vjp(g):
        # Reflection duplicates interior rows into the pad; the adjoint
        # folds the pad back onto those rows.  The 2-D pad factors into
        # two 1-D pads, so fold height first, then width.
        gh = np.ascontiguousarray(g[:, :, pt:pt + h, :])
        if pt:
            gh[:, :, 1:pt + 1, :] += g[:, :, pt - 1::-1, :]
        if pb:
            gh[:, :, h - pb - 1:h - 1, :] += g[:, :, :pt + h - 1:-1, :]
        gx = np.ascontiguousarray(gh[:, :, :, pl:pl + w])
        if pl:
            gx[:, :, :, 1:pl + 1] += gh[:, :, :, pl - 1::-1]
        if pr:
            gx[:, :, :, w - pr - 1:w - 1] += gh[:, :, :, :pl + w - 1:-1]
        return (gx,)

    return Tensor._op(out, (x,), vjp)


def _windows(a: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    """Zero-copy sliding-window view of shape (n, c, ho, wo, kh, kw)."""
    n, c, h, w = a.shape
    ho = (h - kh) // stride + 1
    wo = (w - kw) // stride + 1
    sn, sc, sh, sw = a.strides
    return np.lib.stride_tricks.as_strided(
        a,
        shape=(n, c, ho, wo, kh, kw),
        strides=(sn, sc, sh * stride, sw * stride, sh, sw),
        writeable=False,
    )


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: str = "same-reflect") -> Tensor:
    """Cross-correlate a (n, c, h, w) tensor with (out_c, in_c, kh, kw) weights.

    `same-reflect` keeps the spatial size (divided by `stride`, which must
    divide it); `valid` keeps only fully covered positions.  Kernels must
    be odd so `same` padding is symmetric.
    """
    if x.data.ndim != 4:
        raise ValueError(f"conv2d wants a rank-4 input, got {x.data.shape}")
    if weight.data.ndim != 4:
        raise ValueError(f"conv2d wants rank-4 weights, got {weight.data.shape}")
    out_c, in_c, kh, kw = weight.data.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"conv2d kernel dims must be odd, got ({kh}, {kw})")
    n, c, h, w = x.data.shape
    if c != in_c:
        raise ValueError(f"conv2d channel mismatch: input has {c}, weight wants {in_c}")
    if bias is not None and bias.data.shape != (out_c,):
        raise ValueError(f"conv2d bias shape {bias.data.shape} != ({out_c},)")
    if stride < 1:
        raise ValueError(f"conv2d stride must be >= 1, got {stride}")

    if padding == "same-reflect":
        if h % stride != 0 or w % stride != 0:
            raise ValueError(f"stride {stride} does not divide spatial dims ({h}, {w})")
        xp = pad_reflect(x, (kh - 1) // 2, (kw - 1) // 2)
    elif padding == "valid":
        if h < kh or w < kw:
            raise ValueError(f"valid conv2d: kernel ({kh}, {kw}) larger than input ({h}, {w})")
        if (h - kh) % stride != 0 or (w - kw) % stride != 0:
            raise ValueError(f"stride {stride} does not divide valid extent ({h - kh}, {w - kw})")
        xp = x
    else:
        raise ValueError(f"unknown padding mode {padding!r}")

    return _conv_valid(xp, weight, bias, stride)


def _conv_valid(x: Tensor, weight: Tensor, bias: Tensor | None, stride: int) -> Tensor:
    xd, wd = x.data, weight.data
    out_c, in_c, kh, kw = wd.shape
    win = _windows(xd, kh, kw, stride)
    out = np.tensordot(win, wd, axes=((1, 4, 5), (1, 2, 3)))  # (n, ho, wo, out_c)
    out = np.ascontiguousarray(np.moveaxis(out, 3, 1))
    if bias is not None:
        out += bias.data.reshape(1, -1, 1, 1)

    parents = (x, weight) if bias is None else (x, weight, bias)

    def vjp(g):
        gx = gw = gb = None
        if weight.requires_grad:
            gw = np.tensordot(g, win, axes=((0, 2, 3), (0, 2, 3)))
        if x.requires_grad:
            gx = np.zeros_like(xd)
            ho, wo = g.shape[2], g.shape[3]
            for i in range(kh):
                for j in range(kw):
                    contrib = np.tensordot(g, wd[:, :, i, j], axes=(1, 0))  # (n, ho, wo, in_c)
                    gx[:, :, i:i + ho * stride:stride, j:j + wo * stride:stride] += \
                        np.moveaxis(contrib, 3, 1)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return (gx, gw) if bias is None else (gx, gw, gb)

    return Tensor._op(out, parents, vjp)


def depthwise_conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Per-channel 3x3-style convolution, stride 1, reflect-padded.

    `weight` has shape (c, 1, kh, kw); channel i of the output sees only
    channel i of the input.
    """
    if weight.data.ndim != 4 or weight.data.shape[1] != 1:
        raise ValueError(f"depthwise weights must be (c, 1, kh, kw), got {weight.data.shape}")
    c_w, _, kh, kw = weight.data.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"depthwise kernel dims must be odd, got ({kh}, {kw})")
    n, c, h, w = x.data.shape
    if c != c_w:
        raise ValueError(f"depthwise channel mismatch: input has {c}, weight has {c_w}")
    xp = pad_reflect(x, (kh - 1) // 2, (kw - 1) // 2)

    xd, wd = xp.data, weight.data
    win = _windows(xd, kh, kw, 1)
    out = np.einsum("nchwij,cij->nchw", win, wd[:, 0], optimize=True)
    out = np.ascontiguousarray(out)
    if bias is not None:
        out += bias.data.reshape(1, -1, 1, 1)

    parents = (xp, weight) if bias is None else (xp, weight, bias)

    def vjp(g):
        gx = gw = gb = None
        if weight.requires_grad:
            gw = np.einsum("nchw,nchwij->cij", g, win, optimize=True)[:, None]
        if xp.requires_grad:
            gx = np.zeros_like(xd)
            ho, wo = g.shape[2], g.shape[3]
            for i in range(kh):
                for j in range(kw):
                    gx[:, :, i:i + ho, j:j + wo] += g * wd[None, :, 0, i, j, None, None]
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return (gx, gw) if bias is None else (gx, gw, gb)

    return Tensor._op(out, parents, vjp)


def avgpool2d(x: Tensor, k: int) -> Tensor:
    """Non-overlapping k x k mean pooling; k must divide both spatial dims."""
    if x.data.ndim != 4:
        raise ValueError(f"avgpool2d wants a rank-4 tensor, got {x.data.shape}")
    n, c, h, w = x.data.shape
    if k < 1 or h % k != 0 or w % k != 0:
        raise ValueError(f"avgpool2d window {k} does not divide spatial dims ({h}, {w})")
    out = x.data.reshape(n, c, h // k, k, w // k, k).mean(axis=(3, 5))

    def vjp(g):
        g = g / (k * k)
        return (np.repeat(np.repeat(g, k, axis=2), k, axis=3),)

    return Tensor._op(np.ascontiguousarray(out), (x,), vjp)


@lru_cache(maxsize=None)
def _interp_matrix(n_in: int, dtype_name: str) -> np.ndarray:
    """Dense 1-D bilinear interpolation matrix for a 2x upsample.

    Output sample i reads input position (i + 0.5) / 2 - 0.5 with edge
    clamping, which keeps constants exactly constant.
    """
    m = np.zeros((2 * n_in, n_in), dtype=np.float64)
    for i in range(2 * n_in):
        pos = (i + 0.5) / 2.0 - 0.5
        i0 = math.floor(pos)
        frac = pos - i0
        lo = min(max(i0, 0), n_in - 1)
        hi = min(max(i0 + 1, 0), n_in - 1)
        m[i, lo] += 1.0 - frac
        m[i, hi] += frac
    return m.astype(dtype_name)


def upsample2x(x: Tensor) -> Tensor:
    """Bilinear 2x spatial upsample of a (n, c, h, w) tensor."""
    if x.data.ndim != 4:
        raise ValueError(f"upsample2x wants a rank-4 tensor, got {x.data.shape}")
    n, c, h, w = x.data.shape
    mh = _interp_matrix(h, x.data.dtype.name)
    mw = _interp_matrix(w, x.data.dtype.name)
    out = mh @ x.data @ mw.T

    def vjp(g):
        return (mh.T @ g @ mw,)

    return Tensor._op(np.ascontiguousarray(out), (x,), vjp)


# -- nonlinearity --------------------------------------------------------------


def activation(x: Tensor) -> Tensor:
    """Smooth monotone ramp: softplus(2x)/2 - ln(2)/2.

    Zero at the origin, slope sigmoid(2x) everywhere (0.5 at the origin),
    asymptotically the identity for large positive inputs and flat for
    large negative ones.
    """
    d = x.data
    a = np.abs(d)
    # log(cosh(x)) written to avoid overflow for large |x|
    lncosh = a + np.log1p(np.exp(-2.0 * a)) - math.log(2.0)
    out = 0.5 * d + 0.5 * lncosh

    def vjp(g):
        return (g * (0.5 * (1.0 + np.tanh(d))),)

    return Tensor._op(out.astype(d.dtype, copy=False), (x,), vjp)


# -- gradient checking ----------------------------------------------------------


def grad_check(f, x: Tensor, eps: float = 1e-5, max_coords: int | None = None,
               rng: np.random.Generator | None = None) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    ``f`` maps the tensor to a scalar Tensor and must evaluate the tensor
    it is handed (it may close over ``x`` directly).  ``x`` must be a
    float64 leaf with ``requires_grad``.  When ``max_coords`` is given,
    a deterministic random subset of coordinates is checked instead of
    every one; each checked coordinate still uses full central differences.
    """
    if not (1e-7 <= eps <= 1e-3):
        raise ValueError(f"grad_check eps {eps} outside [1e-7, 1e-3]")
    if x.data.dtype != np.float64:
        raise ValueError("grad_check needs a float64 tensor")
    if not x.requires_grad:
        raise ValueError("grad_check needs requires_grad on the probed tensor")

    x.grad = None
    out = f(x)
    if out.data.size != 1:
        raise ValueError("grad_check objective must be scalar")
    if not np.isfinite(out.data).all():
        raise ValueError("grad_check objective is not finite")
    out.backward()
    analytic = (x.grad if x.grad is not None else np.zeros_like(x.data)).ravel()

    n = x.data.size
    if max_coords is None or max_coords >= n:
        coords = np.arange(n)
    else:
        if rng is None:
            rng = np.random.default_rng(0)
        coords = np.sort(rng.choice(n, size=max_coords, replace=False))

    flat = x.data.ravel()
    worst = 0.0
    with no_grad():
        for ci in coords:
            keep = flat[ci]
            flat[ci] = keep + eps
            fp = float(f(x).data.reshape(()))
            flat[ci] = keep - eps
            fm = float(f(x).data.reshape(()))
            flat[ci] = keep
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise ValueError("grad_check objective is not finite near the base point")
            numeric = (fp - fm) / (2.0 * eps)
            a = analytic[ci]
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst


def grad_check_params(f, params, eps: float = 1e-5, coords_per_tensor: int = 2,
                      rng: np.random.Generator | None = None) -> float:
    """grad_check over many leaves with one shared analytic backward pass.

    ``f`` takes no arguments and evaluates the scalar objective from the
    live ``params`` tensors.  Finite differences probe a deterministic
    coordinate sample of every tensor.  Returns the max relative error.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    params = list(params)
    zero_grads(params)
    out = f()
    if out.data.size != 1:
        raise ValueError("grad_check_params objective must be scalar")
    out.backward()
    analytic = [
        (p.grad if p.grad is not None else np.zeros_like(p.data)).ravel().copy()
        for p in params
    ]

    worst = 0.0
    with no_grad():
        for p, ana in zip(params, analytic):
            if p.data.dtype != np.float64:
                raise ValueError("grad_check_params needs float64 parameters")
            n = p.data.size
            k = min(coords_per_tensor, n)
            coords = np.sort(rng.choice(n, size=k, replace=False))
            flat = p.data.ravel()
            for ci in coords:
                keep = flat[ci]
                flat[ci] = keep + eps
                fp = float(f().data.reshape(()))
                flat[ci] = keep - eps
                fm = float(f().data.reshape(()))
                flat[ci] = keep
                numeric = (fp - fm) / (2.0 * eps)
                a = ana[ci]
                err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
                worst = max(worst, err)
    return worst
