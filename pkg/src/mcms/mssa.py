"""Multi-scale stripe attention.

A feature map is projected down to c/8 channels and flattened into a
full-resolution descriptor plus three pooled descriptors (2x, 4x, 8x
average pooling).  Each pooled descriptor yields a pair of row-stochastic
stripe matrices, one attending from full resolution to the pooled grid
and one back.  The products of the three pairs are summed and softmaxed
into a dense (hw x hw) attention map, which reweights the *unprojected*
input; the result rides on the input as a residual.

Two exact fixed points anchor the tests: a zero input stays zero (the
attention term multiplies the raw input), and a channelwise-constant
input comes back doubled (all stripe logits are constant, so every
attention matrix is uniform and the attention term reproduces the input).

The dense map is quadratic in pixel count, so spatial dims must be
divisible by 8 and are expected to stay desk-scale (around 64x64).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import (Tensor, avgpool2d, cast, chunk, concat, conv2d, matmul,
                     softmax_rows, transpose)

__all__ = [
    "MssaParams",
    "StripeWeights",
    "descriptors",
    "stripe_weights",
    "mssa_forward",
    "workspace_elements",
]

POOL_SCALES = (2, 4, 8)


class MssaParams:
    """A single shared 1x1 projection from c channels to c/8."""

    def __init__(self, channels: int, rng: np.random.Generator, dtype=np.float32):
        if channels % 8 != 0:
            raise ValueError(f"stripe attention needs channels divisible by 8, got {channels}")
        self.channels = channels
        bound = 1.0 / np.sqrt(channels)
        self.proj_w = Tensor(
            rng.uniform(-bound, bound, size=(channels // 8, channels, 1, 1)).astype(dtype),
            requires_grad=True)
        self.proj_b = Tensor(np.zeros(channels // 8, dtype=dtype), requires_grad=True)

    def named_params(self, prefix: str):
        yield f"{prefix}.proj.w", self.proj_w
        yield f"{prefix}.proj.b", self.proj_b


@dataclass
class StripeWeights:
    """Row-stochastic attention pair for one pooling scale."""

    sx: Tensor  # (hw, hw / s^2)
    sy: Tensor  # (hw / s^2, hw)
    scale: int


def descriptors(x: Tensor, p: MssaParams):
    """Project one sample and flatten it at every pooling scale.

    ``x`` is (1, c, h, w); returns the full-resolution descriptor of shape
    (c/8, hw) followed by the three pooled descriptors (c/8, hw/s^2).
    """
    if x.ndim != 4 or x.shape[0] != 1:
        raise ValueError(f"descriptors want a single (1, c, h, w) sample, got {x.shape}")
    _, c, h, w = x.shape
    if c != p.channels:
        raise ValueError(f"projection built for {p.channels} channels, got {c}")
    if h % 8 != 0 or w % 8 != 0:
        raise ValueError(f"stripe attention needs spatial dims divisible by 8, got ({h}, {w})")
    c8 = c // 8
    proj = conv2d(x, p.proj_w, p.proj_b)
    out = [proj.reshape(c8, h * w)]
    for s in POOL_SCALES:
        pooled = avgpool2d(proj, s)
        out.append(pooled.reshape(c8, (h // s) * (w // s)))
    return tuple(out)


def stripe_weights(a: Tensor, pooled: Tensor, scale: int) -> StripeWeights:
    """Row-normalized attention between full-resolution and pooled grids."""
    sx = softmax_rows(matmul(transpose(a), pooled))
    sy = softmax_rows(matmul(transpose(pooled), a))
    return StripeWeights(sx=sx, sy=sy, scale=scale)


def _attend_one(x: Tensor, p: MssaParams) -> Tensor:
    _, c, h, w = x.shape
    hw = h * w
    a, b, cc, d = descriptors(x, p)
    pairs = [stripe_weights(a, m, s) for m, s in zip((b, cc, d), POOL_SCALES)]
    fused = None
    for pair in pairs:
        prod = matmul(pair.sx, pair.sy)
        fused = prod if fused is None else fused + prod
    f = softmax_rows(fused)
    r = x.reshape(c, hw)
    att = matmul(r, f).reshape(1, c, h, w)
    return att + x


def mssa_forward(x: Tensor, p: MssaParams) -> Tensor:
    """Apply stripe attention to a (n, c, h, w) tensor, sample by sample.

    The attention chain multiplies several softmax-normalized matrices,
    so it runs in f64 regardless of storage dtype; f32 accumulation
    would visibly erode the row-stochastic fixed points at realistic
    map sizes.  The result returns to the caller's precision.
    """
    if x.ndim != 4:
        raise ValueError(f"stripe attention wants a rank-4 tensor, got {x.shape}")
    out_dtype = x.data.dtype
    x64 = cast(x, np.float64)
    n = x64.shape[0]
    if n == 1:
        out = _attend_one(x64, p)
    else:
        out = concat([_attend_one(s, p) for s in chunk(x64, n, axis=0)], axis=0)
    return cast(out, out_dtype)


def workspace_elements(c: int, h: int, w: int) -> dict:
    """Element counts of the dominant per-sample attention intermediates."""
    hw = h * w
    counts = {"r": c * hw, "f": hw * hw}
    for s in POOL_SCALES:
        counts[f"sx{s}"] = hw * (hw // (s * s))
        counts[f"sy{s}"] = (hw // (s * s)) * hw
    return counts
