"""Frequency decomposition of images.

An orthonormal 2-D DCT (type II) splits an image into low- and
high-frequency components: coefficients whose normalized position
(u/h + v/w) falls at or below a cutoff ``tau`` form the low band, the
rest the high band.  Because the transform is orthonormal, the two
components sum back to the input exactly and energy is preserved
(Parseval), which the tests lean on heavily.

Everything here is plain numpy on (..., h, w) arrays; the transform is
applied to the two trailing axes.  The separable cosine-matrix form is
the direct O(n^2)-per-axis definition, not an FFT-based fast path.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

__all__ = ["dct2", "idct2", "fft2", "FrequencyMask", "split_hf_lf"]


@lru_cache(maxsize=None)
def _dct_matrix(n: int, dtype_name: str) -> np.ndarray:
    """Orthonormal DCT-II basis: row k holds cos(pi*(2i+1)*k / (2n)) scaled."""
    if n < 1:
        raise ValueError(f"dct size must be >= 1, got {n}")
    i = np.arange(n, dtype=np.float64)
    k = i.reshape(-1, 1)
    m = np.cos(np.pi * (2.0 * i + 1.0) * k / (2.0 * n))
    m[0] *= np.sqrt(1.0 / n)
    m[1:] *= np.sqrt(2.0 / n)
    return m.astype(dtype_name)


def dct2(x: np.ndarray) -> np.ndarray:
    """Orthonormal 2-D DCT-II over the two trailing axes."""
    x = np.asarray(x)
    h, w = x.shape[-2], x.shape[-1]
    th = _dct_matrix(h, x.dtype.name)
    tw = _dct_matrix(w, x.dtype.name)
    return th @ x @ tw.T


def idct2(s: np.ndarray) -> np.ndarray:
    """Inverse of :func:`dct2`; the basis matrices are orthogonal."""
    s = np.asarray(s)
    h, w = s.shape[-2], s.shape[-1]
    th = _dct_matrix(h, s.dtype.name)
    tw = _dct_matrix(w, s.dtype.name)
    return th.T @ s @ tw


def fft2(x: np.ndarray) -> np.ndarray:
    """Unnormalized 2-D DFT over the trailing axes (complex output)."""
    return np.fft.fft2(np.asarray(x), axes=(-2, -1))


@dataclass(frozen=True)
class FrequencyMask:
    """Boolean keep-mask over DCT coefficients for one spatial shape.

    ``keep[u, v]`` is True for the low-frequency band:
    u/h + v/w <= tau.  The (0, 0) DC coefficient is always kept for any
    tau >= 0, so the low band carries the image mean.
    """

    keep: np.ndarray
    tau: float

    @classmethod
    def for_shape(cls, h: int, w: int, tau: float) -> "FrequencyMask":
        if not (0.0 <= tau <= 2.0):
            raise ValueError(f"tau must lie in [0, 2], got {tau}")
        if h < 1 or w < 1:
            raise ValueError(f"mask needs positive dims, got ({h}, {w})")
        u = np.arange(h, dtype=np.float64).reshape(-1, 1) / h
        v = np.arange(w, dtype=np.float64).reshape(1, -1) / w
        keep = (u + v) <= tau
        keep.flags.writeable = False
        return cls(keep=keep, tau=float(tau))

    @property
    def shape(self) -> tuple[int, int]:
        return self.keep.shape


def split_hf_lf(x: np.ndarray, mask: FrequencyMask) -> tuple[np.ndarray, np.ndarray]:
    """Split an image into (high, low) frequency components.

    Both components live in the pixel domain and sum to ``x`` up to float
    round-off.  Works on any (..., h, w) array; the mask must match the
    trailing dims.
    """
    x = np.asarray(x)
    if x.shape[-2:] != mask.keep.shape:
        raise ValueError(f"mask shape {mask.keep.shape} does not match image dims {x.shape[-2:]}")
    s = dct2(x)
    keep = mask.keep.astype(x.dtype)
    lf = idct2(s * keep)
    hf = idct2(s * (1.0 - keep))
    return hf, lf
