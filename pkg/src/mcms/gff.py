"""Grouped feature fusion.

Two same-shape feature maps are merged by summing them, lifting the sum
through a shared 3x3 conv, splitting the result into four channel groups,
and refining the groups with a cascade of growing receptive fields: each
group conv (1x1, 3x3, 5x5, 7x7) sees its own group plus the previous
group's refined output.  The concatenated groups ride on the shared map
as a residual.  Only the sum of the inputs ever enters the computation,
so the fusion is exactly symmetric in its two arguments.
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, chunk, concat, conv2d

__all__ = ["GffParams", "gff_forward"]


class GffParams:
    """Weights for one fusion module over `channels` (divisible by 4).

    `shared_w/b` is the 3x3 conv applied to the summed inputs; `group`
    holds the four cascade convs with kernel sizes 1, 3, 5, 7, each
    mapping channels/4 to channels/4.
    """

    KERNELS = (1, 3, 5, 7)

    def __init__(self, channels: int, rng: np.random.Generator, dtype=np.float32):
        if channels % 4 != 0:
            raise ValueError(f"grouped fusion needs channels divisible by 4, got {channels}")
        self.channels = channels
        g = channels // 4
        self.shared_w, self.shared_b = _conv_init(rng, channels, channels, 3, dtype)
        self.group = [_conv_init(rng, g, g, k, dtype) for k in self.KERNELS]

    def named_params(self, prefix: str):
        yield f"{prefix}.shared.w", self.shared_w
        yield f"{prefix}.shared.b", self.shared_b
        for k, (w, b) in zip(self.KERNELS, self.group):
            yield f"{prefix}.g{k}.w", w
            yield f"{prefix}.g{k}.b", b


def _conv_init(rng, out_c, in_c, k, dtype):
    fan_in = in_c * k * k
    bound = 1.0 / np.sqrt(fan_in)
    w = Tensor(rng.uniform(-bound, bound, size=(out_c, in_c, k, k)).astype(dtype),
               requires_grad=True)
    b = Tensor(np.zeros(out_c, dtype=dtype), requires_grad=True)
    return w, b


def gff_forward(i1: Tensor, i2: Tensor, p: GffParams) -> Tensor:
    """Fuse two (n, c, h, w) feature maps; output has the same shape."""
    if i1.shape != i2.shape:
        raise ValueError(f"fusion inputs differ in shape: {i1.shape} vs {i2.shape}")
    if i1.shape[1] != p.channels:
        raise ValueError(f"fusion built for {p.channels} channels, got {i1.shape[1]}")

    m = conv2d(i1 + i2, p.shared_w, p.shared_b)
    parts = chunk(m, 4)

    refined = []
    prev = None
    for (w, b), part in zip(p.group, parts):
        inp = part if prev is None else prev + part
        prev = conv2d(inp, w, b)
        refined.append(prev)

    return concat(refined) + m
