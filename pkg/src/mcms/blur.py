"""Synthetic motion blur and dataset manifests.

The physical model is the usual one: a blurry frame is the sharp frame
convolved with a motion point-spread function plus sensor noise.  Kernels
here are anti-aliased straight lines through the kernel center, built by
area sampling so an axis-aligned line of length L comes out exactly
uniform (1/L per covered pixel).

Datasets are directories of 8-bit RGB PNGs described by a manifest.json
with fields exactly {seed, noise_sigma, entries: [{id, blurry, sharp}]}.
Paths inside the manifest are relative to the manifest's directory.
Generation is deterministic: image i uses the stream seeded with
(manifest seed XOR i), so a manifest can be rebuilt byte for byte.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

__all__ = [
    "BlurKernel",
    "motion_kernel",
    "synthesize_blur",
    "DatasetManifest",
    "ManifestEntry",
    "build_manifest",
    "load_manifest",
    "load_image",
    "save_image",
    "generate_sharp_images",
]


# -- kernels -----------------------------------------------------------------


@dataclass(frozen=True)
class BlurKernel:
    """Normalized PSF taps plus the line parameters that produced them."""

    taps: np.ndarray
    length: float
    angle: float


def motion_kernel(length: float, angle: float) -> BlurKernel:
    """Anti-aliased linear motion PSF.

    The kernel covers a 1-pixel-wide rectangle of the given length through
    the center at ``angle`` degrees, weighted by area and normalized to
    sum 1.  length 1 degenerates to a single unit tap.
    """
    if length < 1:
        raise ValueError(f"kernel length must be >= 1, got {length}")
    if length == 1:
        return BlurKernel(taps=np.ones((1, 1), dtype=np.float64), length=1.0, angle=float(angle))

    theta = math.radians(angle)
    ca, sa = math.cos(theta), math.sin(theta)
    half = length / 2.0
    # odd kernel wide enough for any rotation of the segment
    reach = half * (abs(ca) + abs(sa)) + 0.5
    k = 2 * int(math.ceil(reach - 0.5)) + 1
    c = k // 2

    # area sampling: a deterministic offset grid over the rectangle, binned
    # by nearest pixel center; uniform density makes axis-aligned lines exact
    per_unit = 48
    nl = max(2, int(round(length * per_unit)))
    nw = per_unit
    t = (np.arange(nl) + 0.5) / nl * length - half
    u = (np.arange(nw) + 0.5) / nw - 0.5
    px = t[:, None] * ca + u[None, :] * (-sa)
    py = t[:, None] * sa + u[None, :] * ca
    ix = np.rint(px).astype(int) + c
    iy = np.rint(py).astype(int) + c
    taps = np.zeros((k, k), dtype=np.float64)
    np.add.at(taps, (iy.ravel(), ix.ravel()), 1.0)
    taps /= taps.sum()

    # trim all-zero border pairs, keeping the kernel odd and centered
    while taps.shape[0] > 1 and not taps[0].any() and not taps[-1].any():
        taps = taps[1:-1, :]
    while taps.shape[1] > 1 and not taps[:, 0].any() and not taps[:, -1].any():
        taps = taps[:, 1:-1]
    taps = np.ascontiguousarray(taps)
    taps.flags.writeable = False
    return BlurKernel(taps=taps, length=float(length), angle=float(angle))


def _convolve_reflect(img: np.ndarray, taps: np.ndarray) -> np.ndarray:
    """True convolution of (..., h, w) with reflect padding, same size."""
    kh, kw = taps.shape
    ph, pw = kh // 2, kw // 2
    flipped = taps[::-1, ::-1]
    pad = [(0, 0)] * (img.ndim - 2) + [(ph, ph), (pw, pw)]
    xp = np.pad(img, pad, mode="reflect")
    h, w = img.shape[-2], img.shape[-1]
    out = np.zeros_like(img, dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            t = flipped[i, j]
            if t != 0.0:
                out += t * xp[..., i:i + h, j:j + w]
    return out.astype(img.dtype, copy=False)


def synthesize_blur(sharp: np.ndarray, kernel: BlurKernel, noise_sigma: float,
                    seed: int) -> np.ndarray:
    """Blur + seeded Gaussian noise, clamped back to [0, 1]."""
    sharp = np.asarray(sharp)
    if sharp.min() < 0.0 or sharp.max() > 1.0:
        raise ValueError("sharp image must lie in [0, 1]")
    if noise_sigma < 0:
        raise ValueError(f"noise_sigma must be >= 0, got {noise_sigma}")
    blurred = _convolve_reflect(sharp.astype(np.float64), kernel.taps)
    if noise_sigma > 0:
        rng = np.random.default_rng(seed)
        blurred = blurred + rng.normal(0.0, noise_sigma, size=blurred.shape)
    return np.clip(blurred, 0.0, 1.0).astype(np.float32)


# -- image files ---------------------------------------------------------------


def load_image(path: str) -> np.ndarray:
    """Read a PNG as float32 (3, h, w) in [0, 1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    return np.ascontiguousarray(arr.transpose(2, 0, 1)) / 255.0


def save_image(path: str, img: np.ndarray) -> None:
    """Write a float (3, h, w) image in [0, 1] as an 8-bit RGB PNG."""
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ValueError(f"expected a (3, h, w) image, got {img.shape}")
    q = np.rint(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(q.transpose(1, 2, 0), mode="RGB").save(path)


# -- manifests ------------------------------------------------------------------


@dataclass(frozen=True)
class ManifestEntry:
    id: str
    blurry: str
    sharp: str


@dataclass
class DatasetManifest:
    """In-memory view of a dataset; `root` anchors the relative paths."""

    seed: int
    noise_sigma: float
    entries: list = field(default_factory=list)
    root: str = "."
    kernel_params: dict | None = None

    def blurry_path(self, e: ManifestEntry) -> str:
        return os.path.join(self.root, e.blurry)

    def sharp_path(self, e: ManifestEntry) -> str:
        return os.path.join(self.root, e.sharp)


def build_manifest(sharp_dir: str, out_dir: str, kernel_params: dict,
                   noise_sigma: float, seed: int) -> DatasetManifest:
    """Blur every PNG in sharp_dir and write blurry PNGs plus manifest.json.

    kernel_params is {"length": L} plus either a fixed "angle" in degrees
    or "angle": None to draw one per image from its seeded stream.  Images
    are processed in sorted filename order; image i uses seed XOR i.
    """
    names = sorted(f for f in os.listdir(sharp_dir) if f.lower().endswith(".png"))
    if not names:
        raise ValueError(f"no PNG images in {sharp_dir}")
    length = kernel_params.get("length", 7)
    angle = kernel_params.get("angle", None)
    os.makedirs(out_dir, exist_ok=True)

    entries = []
    for i, name in enumerate(names):
        img_seed = seed ^ i
        rng = np.random.default_rng(img_seed)
        a = float(rng.uniform(0.0, 180.0)) if angle is None else float(angle)
        kernel = motion_kernel(length, a)
        sharp = load_image(os.path.join(sharp_dir, name))
        blurry = synthesize_blur(sharp, kernel, noise_sigma, img_seed)
        stem = os.path.splitext(name)[0]
        blurry_name = f"{stem}_blurry.png"
        save_image(os.path.join(out_dir, blurry_name), blurry)
        sharp_rel = os.path.relpath(os.path.join(sharp_dir, name), out_dir)
        entries.append(ManifestEntry(id=stem, blurry=blurry_name, sharp=sharp_rel))

    manifest = DatasetManifest(seed=seed, noise_sigma=float(noise_sigma),
                               entries=entries, root=out_dir,
                               kernel_params=dict(kernel_params))
    payload = {
        "seed": seed,
        "noise_sigma": float(noise_sigma),
        "entries": [{"id": e.id, "blurry": e.blurry, "sharp": e.sharp} for e in entries],
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(payload, fh, indent=2)
        fh.write("\n")
    return manifest


def load_manifest(path: str) -> DatasetManifest:
    """Read manifest.json, validating schema and that every path exists."""
    with open(path) as fh:
        raw = json.load(fh)
    allowed = {"seed", "noise_sigma", "entries"}
    extra = set(raw) - allowed
    if extra:
        raise ValueError(f"manifest has unknown fields: {sorted(extra)}")
    for key in allowed:
        if key not in raw:
            raise ValueError(f"manifest is missing field {key!r}")
    root = os.path.dirname(os.path.abspath(path))
    entries = []
    for i, e in enumerate(raw["entries"]):
        if set(e) != {"id", "blurry", "sharp"}:
            raise ValueError(f"manifest entry {i} has fields {sorted(e)}, "
                             "expected [blurry, id, sharp]")
        entry = ManifestEntry(id=e["id"], blurry=e["blurry"], sharp=e["sharp"])
        for p in (entry.blurry, entry.sharp):
            if not os.path.exists(os.path.join(root, p)):
                raise FileNotFoundError(f"manifest entry {entry.id!r}: missing file {p}")
        entries.append(entry)
    return DatasetManifest(seed=int(raw["seed"]), noise_sigma=float(raw["noise_sigma"]),
                           entries=entries, root=root)


# -- procedural sharp content ----------------------------------------------------


def _windowed_gratings(rng: np.random.Generator, img: np.ndarray,
                       xx: np.ndarray, yy: np.ndarray) -> None:
    """Add 5-7 Gaussian-windowed cosine gratings with 9-13 px periods.

    The period band is deliberate: a short motion blur attenuates these
    scales heavily without wiping them out, so restoration has texture
    that is both visibly damaged and actually recoverable.  Orientation
    is uniform.
    """
    size = img.shape[1]
    for _ in range(int(rng.integers(5, 8))):
        phi = rng.uniform(0, np.pi)
        period = rng.uniform(9.0, 13.0) / size
        phase = rng.uniform(0, 2 * np.pi)
        wave = np.cos(2 * np.pi * (np.cos(phi) * xx + np.sin(phi) * yy) / period + phase)
        cx, cy = rng.uniform(0.15, 0.85, 2)
        sx, sy = rng.uniform(0.3, 0.55, 2)
        win = np.exp(-(((xx - cx) / sx) ** 2 + ((yy - cy) / sy) ** 2))
        col = rng.uniform(0.4, 1.0, 3)
        amp = rng.uniform(0.25, 0.45)
        for c in range(3):
            img[c] += amp * col[c] * wave * win


def _soft_blobs(rng: np.random.Generator, img: np.ndarray,
                xx: np.ndarray, yy: np.ndarray) -> None:
    """Add 1-2 sigmoid disks with gentle (multi-pixel) edges; hard edges
    would put energy at scales the blur destroys outright."""
    for _ in range(int(rng.integers(1, 3))):
        cx, cy = rng.uniform(0.2, 0.8, 2)
        rad = rng.uniform(0.1, 0.3)
        soft = rng.uniform(0.04, 0.08)
        d = np.sqrt((xx - cx) ** 2 + (yy - cy) ** 2)
        blob = 1.0 / (1.0 + np.exp((d - rad) / soft))
        amp = rng.uniform(-0.35, 0.35, 3)
        for c in range(3):
            img[c] += amp[c] * blob


def generate_sharp_images(out_dir: str, n: int, size: int, seed: int) -> list:
    """Write n deterministic synthetic sharp PNGs; returns their paths.

    Each image layers per-channel linear gradients, band-controlled
    windowed gratings, and soft disks, then min-max normalizes to [0, 1].
    Image i draws from its own stream (seed XOR i*7919) so the set is
    stable under reordering and n changes.
    """
    if n < 1 or size < 8:
        raise ValueError("need n >= 1 images of size >= 8")
    os.makedirs(out_dir, exist_ok=True)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / size
    paths = []
    for i in range(n):
        rng = np.random.default_rng(seed ^ (i * 7919))
        img = np.zeros((3, size, size))
        for c in range(3):
            a, b = rng.uniform(-0.25, 0.25, 2)
            img[c] = 0.5 + a * (xx - 0.5) + b * (yy - 0.5)
        _windowed_gratings(rng, img, xx, yy)
        _soft_blobs(rng, img, xx, yy)
        lo, hi = img.min(), img.max()
        img = (img - lo) / max(hi - lo, 1e-9)
        path = os.path.join(out_dir, f"img{i:03d}.png")
        save_image(path, img.astype(np.float32))
        paths.append(path)
    return paths
