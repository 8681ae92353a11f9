"""Command-line surface: data synthesis, frequency decomposition,
training, inference, evaluation, and self-verification.

Every subcommand is deterministic given its flags; all randomness flows
from --seed.  Exit codes: 0 success, 1 failure (one-line diagnostic on
stderr), 2 usage error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

import numpy as np

from . import blur, config as config_mod, freq, train_eval
from .blur import build_manifest, generate_sharp_images, load_image, load_manifest, save_image
from .config import RunConfig, load_config, write_resolved_config
from .gff import GffParams, gff_forward
from .model import McmsModel, ModelConfig, init_params, load_weights, mcms_forward, save_weights
from .mssa import MssaParams, mssa_forward
from .tensor import Tensor, conv2d, grad_check, softmax_rows
from .train_eval import evaluate, restore_image, train, write_metrics_csv

__all__ = ["main"]


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mcms",
        description="Frequency-split blind motion deblurring at desk scale.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, *, seed=True, config=False, out_dir=False):
        if seed:
            p.add_argument("--seed", type=int, default=0, help="master random seed")
        if config:
            p.add_argument("--config", help="JSON run config (defaults if omitted)")
        if out_dir:
            p.add_argument("--out-dir", required=True, help="directory for outputs")

    def model_flags(p):
        p.add_argument("--tau", type=float, default=None,
                       help="frequency split threshold override")
        p.add_argument("--no-mssa", action="store_true",
                       help="ablation: disable stripe attention")
        p.add_argument("--no-gff", action="store_true",
                       help="ablation: disable grouped feature fusion")

    def train_flags(p):
        p.add_argument("--steps", type=int, default=None, help="optimizer steps override")
        p.add_argument("--lr", type=float, default=None, help="learning rate override")
        p.add_argument("--batch", type=int, default=None, help="batch size override")
        p.add_argument("--crop", type=int, default=None, help="training crop override")

    p = sub.add_parser("synth", help="generate a synthetic sharp/blurry dataset")
    common(p, out_dir=True)
    p.add_argument("--n", type=int, default=8, help="number of image pairs")
    p.add_argument("--size", type=int, default=64, help="square image size")
    p.add_argument("--length", type=int, default=7, help="motion blur length in pixels")
    p.add_argument("--angle", type=float, default=None,
                   help="blur angle in degrees (default: random per image)")
    p.add_argument("--sigma", type=float, default=0.01, help="additive noise level")

    p = sub.add_parser(
        "decompose", help="split an image into high- and low-frequency PNGs",
        description="Writes {stem}_hf.png and {stem}_lf.png.  Both planes are "
                    "affine-coded to fit 8 bits: HF as value*0.5 + 0.5 (it is "
                    "signed), LF as value*0.5 + 0.25 (it can overshoot [0, 1]); "
                    "the LF plane stores the input minus the decoded HF plane, "
                    "so decoding both and summing reproduces the input to "
                    "within 1/255 per pixel.")
    common(p, seed=False, out_dir=True)
    p.add_argument("--in", dest="in_path", required=True, help="input PNG")
    p.add_argument("--tau", type=float, default=0.1, help="frequency split threshold")

    p = sub.add_parser("train", help="train a model on a synthesized dataset")
    common(p, seed=False, config=True, out_dir=True)
    p.add_argument("--in", dest="in_path", required=True,
                   help="dataset manifest.json (or the directory holding it)")
    model_flags(p)
    train_flags(p)
    p.add_argument("--seed", type=int, default=None, help="seed override")

    p = sub.add_parser("deblur", help="restore a single blurry image")
    common(p, seed=False, config=True, out_dir=True)
    p.add_argument("--in", dest="in_path", required=True, help="blurry PNG")
    p.add_argument("--weights", required=True, help="weight file from train")
    model_flags(p)

    p = sub.add_parser("eval", help="metrics for a model over a dataset")
    common(p, seed=False, config=True, out_dir=True)
    p.add_argument("--in", dest="in_path", required=True,
                   help="dataset manifest.json (or the directory holding it)")
    p.add_argument("--weights", default=None,
                   help="weight file (omit for a fresh identity model)")
    model_flags(p)

    p = sub.add_parser("gradcheck", help="finite-difference checks per operator")
    common(p)

    p = sub.add_parser("selftest", help="run the invariant suite")
    common(p)

    return parser


def _resolve_run_config(args) -> RunConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    model_kw = dataclasses.asdict(cfg.model)
    run_kw = {"lr": cfg.lr, "batch": cfg.batch, "steps": cfg.steps,
              "crop": cfg.crop, "seed": cfg.seed}
    if getattr(args, "tau", None) is not None:
        model_kw["freq_tau"] = args.tau
    if getattr(args, "no_mssa", False):
        model_kw["use_mssa"] = False
    if getattr(args, "no_gff", False):
        model_kw["use_gff"] = False
    for key in ("steps", "lr", "batch", "crop", "seed"):
        v = getattr(args, key, None)
        if v is not None:
            run_kw[key] = v
    out = RunConfig(model=ModelConfig(**model_kw), **run_kw)
    out.validate()
    return out


def _find_manifest(path: str) -> str:
    if os.path.isdir(path):
        path = os.path.join(path, "manifest.json")
    if not os.path.exists(path):
        raise FileNotFoundError(f"no manifest at {path}")
    return path


# -- subcommands -------------------------------------------------------------------


def _cmd_synth(args) -> int:
    sharp_dir = os.path.join(args.out_dir, "sharp")
    generate_sharp_images(sharp_dir, args.n, args.size, args.seed)
    kernel_params = {"length": args.length, "angle": args.angle}
    manifest = build_manifest(sharp_dir, args.out_dir, kernel_params,
                              args.sigma, args.seed)
    print(f"wrote {len(manifest.entries)} pairs under {args.out_dir}")
    return 0


def _cmd_decompose(args) -> int:
    img = load_image(args.in_path)
    h, w = img.shape[1], img.shape[2]
    mask = freq.FrequencyMask.for_shape(h, w, args.tau)
    hf, _ = freq.split_hf_lf(img.astype(np.float64), mask)
    os.makedirs(args.out_dir, exist_ok=True)
    stem = os.path.splitext(os.path.basename(args.in_path))[0]

    hf_path = os.path.join(args.out_dir, f"{stem}_hf.png")
    lf_path = os.path.join(args.out_dir, f"{stem}_lf.png")
    save_image(hf_path, hf * 0.5 + 0.5)
    # decode what the HF file will actually contain, then store the exact
    # remainder so the 8-bit round trip of the pair stays within one step
    hf_dec = (np.rint(np.clip(hf * 0.5 + 0.5, 0, 1) * 255.0) / 255.0 - 0.5) * 2.0
    save_image(lf_path, (img - hf_dec) * 0.5 + 0.25)
    print(f"wrote {hf_path} and {lf_path}")
    return 0


def decode_decomposition(hf_path: str, lf_path: str) -> np.ndarray:
    """Invert the decompose encoding; summing the planes returns the image."""
    hf = (load_image(hf_path) - 0.5) * 2.0
    lf = (load_image(lf_path) - 0.25) * 2.0
    return hf + lf


def _cmd_train(args) -> int:
    cfg = _resolve_run_config(args)
    manifest = load_manifest(_find_manifest(args.in_path))
    os.makedirs(args.out_dir, exist_ok=True)
    write_resolved_config(cfg, args.out_dir)

    model = init_params(cfg.model, cfg.seed)
    state, epochs = train(model, manifest, cfg, log=print)

    weights_path = os.path.join(args.out_dir, "weights.bin")
    save_weights(model, weights_path)
    with open(os.path.join(args.out_dir, "losses.csv"), "w") as fh:
        fh.write("epoch,l_hf,l_lf,l_o,l_msfr,l_total\n")
        for i, bd in enumerate(epochs):
            fh.write(f"{i},{bd.l_hf:.6f},{bd.l_lf:.6f},{bd.l_o:.6f},"
                     f"{bd.l_msfr:.6f},{bd.l_total:.6f}\n")
    rows = evaluate(model, manifest)
    write_metrics_csv(rows, os.path.join(args.out_dir, "metrics.csv"))
    mean = rows[-1]
    print(f"final psnr {mean['psnr_db']:.4f} dB (baseline {mean['baseline_psnr_db']:.4f}); "
          f"weights at {weights_path}")
    return 0


def _cmd_deblur(args) -> int:
    cfg = _resolve_run_config(args)
    model = load_weights(args.weights, cfg.model)
    img = load_image(args.in_path)
    restored = restore_image(img, model)
    os.makedirs(args.out_dir, exist_ok=True)
    stem = os.path.splitext(os.path.basename(args.in_path))[0]
    out_path = os.path.join(args.out_dir, f"{stem}_restored.png")
    save_image(out_path, restored)
    print(f"wrote {out_path}")
    return 0


def _cmd_eval(args) -> int:
    cfg = _resolve_run_config(args)
    manifest = load_manifest(_find_manifest(args.in_path))
    if args.weights:
        model = load_weights(args.weights, cfg.model)
    else:
        model = init_params(cfg.model, cfg.seed if hasattr(cfg, "seed") else 0)
    rows = evaluate(model, manifest)
    os.makedirs(args.out_dir, exist_ok=True)
    csv_path = os.path.join(args.out_dir, "metrics.csv")
    write_metrics_csv(rows, csv_path)
    mean = rows[-1]
    print(f"MEAN psnr {mean['psnr_db']:.4f} ssim {mean['ssim']:.4f} "
          f"(baseline {mean['baseline_psnr_db']:.4f} / {mean['baseline_ssim']:.4f}); "
          f"rows at {csv_path}")
    return 0


def _cmd_gradcheck(args) -> int:
    from .tensor import (activation, avgpool2d, depthwise_conv2d, pad_reflect,
                         upsample2x)

    rng = np.random.default_rng(args.seed)
    checks = []

    x = Tensor(rng.standard_normal((2, 3, 6, 7)), requires_grad=True)
    w = Tensor(rng.standard_normal((4, 3, 3, 3)) * 0.2, requires_grad=True)
    b = Tensor(rng.standard_normal(4) * 0.1, requires_grad=True)
    checks.append(("conv2d/x", grad_check(lambda t: conv2d(t, w, b).abs().mean(), x)))
    checks.append(("conv2d/w", grad_check(lambda t: conv2d(x, t, b).abs().mean(), w)))

    dw = Tensor(rng.standard_normal((3, 1, 3, 3)) * 0.3, requires_grad=True)
    checks.append(("depthwise/w", grad_check(
        lambda t: depthwise_conv2d(x, t, None).abs().mean(), dw)))

    y = Tensor(rng.standard_normal((5, 6)), requires_grad=True)
    y_w = Tensor(rng.standard_normal((5, 6)))
    checks.append(("softmax_rows", grad_check(
        lambda t: (softmax_rows(t) * y_w).sum(), y)))

    z = Tensor(rng.standard_normal((2, 3, 4, 4)), requires_grad=True)
    checks.append(("upsample2x", grad_check(lambda t: upsample2x(t).abs().mean(), z)))
    checks.append(("avgpool2d", grad_check(lambda t: avgpool2d(t, 2).abs().mean(), z)))
    checks.append(("pad_reflect", grad_check(
        lambda t: pad_reflect(t, (1, 2), (2, 1)).abs().mean(), z)))
    checks.append(("activation", grad_check(lambda t: activation(t).abs().mean(), z)))
    checks.append(("fourier_planes", grad_check(
        lambda t: train_eval.fourier_planes(t).abs().mean(), z)))

    worst = 0.0
    failed = False
    for name, err in checks:
        ok = err < 1e-4
        failed |= not ok
        worst = max(worst, err)
        print(f"{'PASS' if ok else 'FAIL'} {name:<16} rel err {err:.3e}")
    print(f"{'FAIL' if failed else 'PASS'} worst {worst:.3e}")
    return 1 if failed else 0


def _cmd_selftest(args) -> int:
    rng = np.random.default_rng(args.seed)
    groups = []

    x = rng.standard_normal((3, 24, 20))
    rt = freq.idct2(freq.dct2(x))
    groups.append(("dct round trip", float(np.abs(rt - x).max()) < 1e-9))

    mask = freq.FrequencyMask.for_shape(24, 20, 0.3)
    hf, lf = freq.split_hf_lf(x, mask)
    groups.append(("frequency partition", float(np.abs((hf + lf) - x).max()) < 1e-9))

    sm = softmax_rows(Tensor(rng.standard_normal((7, 11)))).data
    groups.append(("softmax rows sum to 1", float(np.abs(sm.sum(axis=1) - 1).max()) < 1e-8))

    p = GffParams(8, rng, np.float64)
    for (wt, bt) in p.group:
        wt.data[:] = 0
        for c in range(wt.data.shape[0]):
            wt.data[c, c, wt.data.shape[2] // 2, wt.data.shape[3] // 2] = 1.0
    p.shared_w.data[:] = 0
    for c in range(8):
        p.shared_w.data[c, c, 1, 1] = 1.0
    xin = Tensor(rng.standard_normal((1, 8, 9, 9)))
    outv = gff_forward(xin, xin, p).data
    parts = np.split(2.0 * xin.data, 4, axis=1)
    prefix = np.concatenate(np.cumsum(parts, axis=0), axis=1) + 2.0 * xin.data
    groups.append(("gff dirac oracle", float(np.abs(outv - prefix).max()) < 1e-12))

    mp = MssaParams(8, rng, np.float64)
    zero = Tensor(np.zeros((1, 8, 16, 16)))
    groups.append(("mssa zero fixed point",
                   float(np.abs(mssa_forward(zero, mp).data).max()) == 0.0))

    t = Tensor(rng.standard_normal((2, 3, 6, 6)), requires_grad=True)
    wt = Tensor(rng.standard_normal((3, 3, 3, 3)) * 0.2, requires_grad=True)
    err = grad_check(lambda u: conv2d(u, wt, None).abs().mean(), t)
    groups.append(("gradcheck conv2d", err < 1e-4))

    failed = False
    for name, ok in groups:
        failed |= not ok
        print(f"{'PASS' if ok else 'FAIL'} {name}")
    return 1 if failed else 0


_COMMANDS = {
    "synth": _cmd_synth,
    "decompose": _cmd_decompose,
    "train": _cmd_train,
    "deblur": _cmd_deblur,
    "eval": _cmd_eval,
    "gradcheck": _cmd_gradcheck,
    "selftest": _cmd_selftest,
}


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (ValueError, OSError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
