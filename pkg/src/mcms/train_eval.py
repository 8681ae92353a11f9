"""Losses, image metrics, Adam, and the training / evaluation loops.

The training objective is a sum of three restoration terms: mean-abs
errors on the restored high- and low-frequency components against the
target's own frequency split, plus a full-image term that combines
spatial L1 with a frequency-domain L1 (mean absolute difference between
the images' Fourier transforms, real and imaginary planes stacked),
weighted by ``GAMMA``.

All losses use means rather than sums so their magnitudes do not scale
with crop size and the frequency weighting transfers across resolutions.
"""

from __future__ import annotations

import csv
import io
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .blur import DatasetManifest, load_image
from .freq import FrequencyMask, split_hf_lf
from .model import McmsModel, mcms_forward
from .tensor import Tensor, no_grad, pad_reflect

__all__ = [
    "GAMMA",
    "LossBreakdown",
    "TrainState",
    "l1_loss",
    "fourier_planes",
    "msfr_loss",
    "total_loss",
    "psnr",
    "ssim",
    "adam_step",
    "train_epoch",
    "train",
    "evaluate",
    "write_metrics_csv",
    "worker_count",
]

GAMMA = 0.1  # weight of the frequency term inside the full-image loss


@dataclass(frozen=True)
class LossBreakdown:
    """One loss evaluation, split into its published components."""

    l_hf: float
    l_lf: float
    l_o: float
    l_msfr: float
    l_total: float


def l1_loss(x: Tensor, y) -> Tensor:
    """Mean absolute difference; 0 iff the operands are equal."""
    y_t = y if isinstance(y, Tensor) else Tensor(np.asarray(y, dtype=x.dtype))
    if x.shape != y_t.shape:
        raise ValueError(f"l1_loss shape mismatch: {x.shape} vs {y_t.shape}")
    return (x - y_t).abs().mean()


def fourier_planes(x: Tensor) -> Tensor:
    """2-D DFT of the trailing axes as stacked real/imaginary planes.

    Output shape is (2,) + x.shape.  Differentiable: for an unnormalized
    forward transform the adjoint is h*w times the inverse transform of
    the (complexified) upstream gradient.
    """
    spec = np.fft.fft2(x.data, axes=(-2, -1))
    planes = np.stack([spec.real, spec.imag]).astype(x.dtype, copy=False)
    h, w = x.shape[-2], x.shape[-1]

    def vjp(g):
        gc = g[0] + 1j * g[1]
        gx = (np.fft.ifft2(gc, axes=(-2, -1)).real * (h * w)).astype(x.dtype, copy=False)
        return (gx,)

    return Tensor._op(planes, (x,), vjp)


def msfr_loss(x: Tensor, y) -> Tensor:
    """Mean absolute spectral difference over stacked real/imag planes."""
    y_t = y if isinstance(y, Tensor) else Tensor(np.asarray(y, dtype=x.dtype))
    if x.shape != y_t.shape:
        raise ValueError(f"msfr_loss shape mismatch: {x.shape} vs {y_t.shape}")
    return (fourier_planes(x) - fourier_planes(y_t)).abs().mean()


def total_loss(out, target_sharp: np.ndarray, mask: FrequencyMask):
    """Combine the three restoration terms.

    ``out`` is the (restored, restored_hf, restored_lf) triple from
    :func:`mcms_forward`; the target is split with the same mask the
    model used.  Returns the scalar loss tensor (for backward) together
    with a float LossBreakdown.
    """
    restored, hf, lf = out
    y_hf, y_lf = split_hf_lf(np.asarray(target_sharp), mask)
    l_hf = l1_loss(hf, y_hf.astype(hf.dtype, copy=False))
    l_lf = l1_loss(lf, y_lf.astype(lf.dtype, copy=False))
    l_sp = l1_loss(restored, np.asarray(target_sharp, dtype=restored.dtype))
    l_fr = msfr_loss(restored, np.asarray(target_sharp, dtype=restored.dtype))
    l_o = l_sp + Tensor(np.asarray(GAMMA, dtype=l_fr.dtype)) * l_fr
    total = l_hf + l_lf + l_o
    breakdown = LossBreakdown(
        l_hf=l_hf.data.item(), l_lf=l_lf.data.item(),
        l_o=l_o.data.item(), l_msfr=l_fr.data.item(),
        l_total=total.data.item())
    return total, breakdown


# -- metrics -----------------------------------------------------------------------


def psnr(x: np.ndarray, y: np.ndarray) -> float:
    """Peak signal-to-noise ratio for unit-range images, in dB."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"psnr shape mismatch: {x.shape} vs {y.shape}")
    mse = float(np.mean((x - y) ** 2))
    if mse == 0.0:
        return math.inf
    return -10.0 * math.log10(mse)


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    r = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(r * r) / (2.0 * sigma * sigma))
    g /= g.sum()
    return np.outer(g, g)


def _to_gray(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        return x.mean(axis=0)
    if x.ndim == 2:
        return x
    raise ValueError(f"expected a (3, h, w) or (h, w) image, got {x.shape}")


def _window_means(img: np.ndarray, win: np.ndarray) -> np.ndarray:
    k = win.shape[0]
    view = np.lib.stride_tricks.sliding_window_view(img, (k, k))
    return np.tensordot(view, win, axes=((2, 3), (0, 1)))


def ssim(x: np.ndarray, y: np.ndarray) -> float:
    """Mean local structural similarity on the channel-mean grayscale.

    11x11 Gaussian window (sigma 1.5), K1 0.01, K2 0.03, unit dynamic
    range, valid-region statistics only.  Returns exactly 1 for x == y.
    """
    gx = _to_gray(x)
    gy = _to_gray(y)
    if gx.shape != gy.shape:
        raise ValueError(f"ssim shape mismatch: {gx.shape} vs {gy.shape}")
    win = _gaussian_window()
    k = win.shape[0]
    if gx.shape[0] < k or gx.shape[1] < k:
        raise ValueError(f"image {gx.shape} is smaller than the {k}x{k} ssim window")

    c1 = 0.01 ** 2
    c2 = 0.03 ** 2
    mu_x = _window_means(gx, win)
    mu_y = _window_means(gy, win)
    xx = _window_means(gx * gx, win) - mu_x * mu_x
    yy = _window_means(gy * gy, win) - mu_y * mu_y
    xy = _window_means(gx * gy, win) - mu_x * mu_y
    num = (2.0 * mu_x * mu_y + c1) * (2.0 * xy + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (xx + yy + c2)
    return float(np.mean(num / den))


# -- optimization ------------------------------------------------------------------


@dataclass
class TrainState:
    """Adam moments and bookkeeping; moments mirror parameter shapes."""

    lr: float
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    loss_history: list = field(default_factory=list)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(state: TrainState, grads: dict, params: dict) -> TrainState:
    """One bias-corrected Adam update, in place on the parameter tensors."""
    state.step += 1
    t = state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.data.shape:
            raise ValueError(
                f"gradient shape {g.shape} does not match parameter {name!r} "
                f"of shape {p.data.shape}")
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.data, dtype=np.float64)
            state.m[name] = m
            state.v[name] = np.zeros_like(p.data, dtype=np.float64)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        m_hat = m / (1.0 - state.beta1 ** t)
        v_hat = v / (1.0 - state.beta2 ** t)
        upd = state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
        p.data = (p.data - upd.astype(p.data.dtype, copy=False)).astype(p.data.dtype, copy=False)
    return state


# -- training loop -----------------------------------------------------------------


def _load_pairs(manifest: DatasetManifest):
    pairs = []
    for e in manifest.entries:
        pairs.append((load_image(manifest.blurry_path(e)),
                      load_image(manifest.sharp_path(e))))
    return pairs


def _augment(blurry: np.ndarray, sharp: np.ndarray, crop: int, rng) -> tuple:
    """Shared random crop plus a coin-flip horizontal mirror."""
    _, h, w = blurry.shape
    top = int(rng.integers(0, h - crop + 1))
    left = int(rng.integers(0, w - crop + 1))
    b = blurry[:, top:top + crop, left:left + crop]
    s = sharp[:, top:top + crop, left:left + crop]
    if rng.random() < 0.5:
        b = b[:, :, ::-1]
        s = s[:, :, ::-1]
    return np.ascontiguousarray(b), np.ascontiguousarray(s)


def train_epoch(model: McmsModel, manifest: DatasetManifest, state: TrainState,
                config, rng: np.random.Generator, pairs=None) -> LossBreakdown:
    """One seeded pass over the dataset: shuffle, crop, step per batch.

    ``config`` needs .batch and .crop attributes.  ``pairs`` lets
    callers pass preloaded (blurry, sharp) arrays; otherwise images are
    read from the manifest.  Returns the mean breakdown over the epoch's
    batches; per-batch totals are appended to state.loss_history.
    """
    if not manifest.entries:
        raise ValueError("manifest has no entries")
    crop = int(config.crop)
    if crop % 32 != 0:
        raise ValueError(f"crop must be divisible by 32, got {crop}")
    if pairs is None:
        pairs = _load_pairs(manifest)
    for b_img, _ in pairs:
        if b_img.shape[1] < crop or b_img.shape[2] < crop:
            raise ValueError(
                f"crop {crop} exceeds image size {b_img.shape[1:]} in the manifest")

    mask = FrequencyMask.for_shape(crop, crop, model.config.freq_tau)
    order = rng.permutation(len(pairs))
    params = model.params()
    sums = np.zeros(5)
    n_batches = 0
    batch = int(config.batch)
    for start in range(0, len(order), batch):
        idx = order[start:start + batch]
        cropped = [_augment(*pairs[i], crop, rng) for i in idx]
        b = Tensor(np.stack([c[0] for c in cropped]))
        y = np.stack([c[1] for c in cropped])
        out = mcms_forward(b, model, mask)
        loss, bd = total_loss(out, y, mask)
        model_zero_grads(model)
        loss.backward()
        grads = {n: t.grad for n, t in params.items() if t.grad is not None}
        adam_step(state, grads, params)
        state.loss_history.append(bd.l_total)
        sums += (bd.l_hf, bd.l_lf, bd.l_o, bd.l_msfr, bd.l_total)
        n_batches += 1
    sums /= n_batches
    return LossBreakdown(*sums.tolist())


def model_zero_grads(model: McmsModel) -> None:
    for _, t in model.named_params():
        t.grad = None


def train(model: McmsModel, manifest: DatasetManifest, config, log=None):
    """Run optimizer steps until config.steps is reached.

    Epochs repeat over the manifest with a generator seeded once from
    config.seed, so the whole run is a pure function of (config, data).
    Returns the final TrainState and the list of per-epoch breakdowns.
    """
    state = TrainState(lr=float(config.lr))
    rng = np.random.default_rng(config.seed)
    pairs = _load_pairs(manifest)
    epochs = []
    while state.step < config.steps:
        bd = train_epoch(model, manifest, state, config, rng, pairs=pairs)
        epochs.append(bd)
        if log is not None and (len(epochs) % 25 == 1 or state.step >= config.steps):
            log(f"step {state.step:>5}  l_total {bd.l_total:.5f}  "
                f"(hf {bd.l_hf:.5f}  lf {bd.l_lf:.5f}  o {bd.l_o:.5f})")
    return state, epochs


# -- evaluation --------------------------------------------------------------------


def worker_count(n_items: int) -> int:
    """Worker pool size: min(items, cpus), capped by MCMS_THREADS."""
    cap = os.environ.get("MCMS_THREADS")
    workers = os.cpu_count() or 1
    if cap is not None:
        try:
            workers = max(1, int(cap))
        except ValueError:
            raise ValueError(f"MCMS_THREADS must be an integer, got {cap!r}")
    return max(1, min(n_items, workers))


def _pad_to_32(img: np.ndarray):
    """Reflect-pad a (3, h, w) image so both dims divide 32."""
    _, h, w = img.shape
    ph = (-h) % 32
    pw = (-w) % 32
    if ph == 0 and pw == 0:
        return img, h, w
    x = Tensor(img[None])
    x = pad_reflect(x, (0, ph), (0, pw))
    return x.data[0], h, w


def restore_image(blurry: np.ndarray, model: McmsModel) -> np.ndarray:
    """Deblur one (3, h, w) image of any size; output matches the input
    size and is clamped to [0, 1]."""
    padded, h, w = _pad_to_32(np.asarray(blurry, dtype=np.float32))
    mask = FrequencyMask.for_shape(padded.shape[1], padded.shape[2], model.config.freq_tau)
    with no_grad():
        restored, _, _ = mcms_forward(padded[None], model, mask)
    out = restored.data[0, :, :h, :w]
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def evaluate(model: McmsModel, manifest: DatasetManifest):
    """Metrics per manifest entry plus means, restored vs blurry baseline.

    Images are processed by a thread pool (size from MCMS_THREADS) but
    collected in manifest order, so output is deterministic.  Returns a
    list of row dicts; the final row has id ``MEAN``.
    """

    def one(e):
        blurry = load_image(manifest.blurry_path(e))
        sharp = load_image(manifest.sharp_path(e))
        restored = restore_image(blurry, model)
        return {
            "id": e.id,
            "psnr_db": psnr(restored, sharp),
            "ssim": ssim(restored, sharp),
            "baseline_psnr_db": psnr(blurry, sharp),
            "baseline_ssim": ssim(blurry, sharp),
        }

    entries = manifest.entries
    if not entries:
        raise ValueError("manifest has no entries")
    with ThreadPoolExecutor(max_workers=worker_count(len(entries))) as pool:
        rows = list(pool.map(one, entries))
    mean_row = {"id": "MEAN"}
    for key in ("psnr_db", "ssim", "baseline_psnr_db", "baseline_ssim"):
        mean_row[key] = float(np.mean([r[key] for r in rows]))
    rows.append(mean_row)
    return rows


def write_metrics_csv(rows, path_or_file) -> None:
    """Serialize evaluate() rows: fixed header, values at 4 decimals."""
    own = isinstance(path_or_file, (str, os.PathLike))
    fh = open(path_or_file, "w", newline="") if own else path_or_file
    try:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["id", "psnr_db", "ssim", "baseline_psnr_db", "baseline_ssim"])
        for r in rows:
            writer.writerow([r["id"]] + [
                f"{r[k]:.4f}" if math.isfinite(r[k]) else "inf"
                for k in ("psnr_db", "ssim", "baseline_psnr_db", "baseline_ssim")])
    finally:
        if own:
            fh.close()


def metrics_csv_text(rows) -> str:
    buf = io.StringIO()
    write_metrics_csv(rows, buf)
    return buf.getvalue()
