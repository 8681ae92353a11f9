"""The three-stage restoration network.

Stage one and stage two are small full-resolution encoder-decoder branches
that restore the high- and low-frequency components of the blurry input
independently; each predicts a residual on top of its component through a
zero-initialized output head, so a fresh model is exactly the identity.
Stage three re-reads the full blurry image, fuses it with the sum of the
two branch decoder features (grouped fusion), pushes the result through a
three-level downsampling encoder, concatenates the bottleneck with pooled
branch encoder features, and decodes back to a full-resolution residual.

Stripe attention sits at each branch's encoder output and on the fused
stage-three bottleneck; both it and the grouped fusion can be switched
off ablation-style via the config flags.

Weights live in little-endian binary files: magic ``MCMS``, format
version, then one self-describing record per tensor (name, rank, dims,
float32 payload) in the model's canonical parameter order.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .freq import FrequencyMask, split_hf_lf
from .gff import GffParams, gff_forward
from .mssa import MssaParams, mssa_forward
from .tensor import Tensor, avgpool2d, chunk, concat, conv2d, depthwise_conv2d, upsample2x

__all__ = [
    "ModelConfig",
    "Block",
    "Branch",
    "Stage3",
    "McmsModel",
    "init_params",
    "mcms_forward",
    "save_weights",
    "load_weights",
    "WeightsError",
]

WEIGHTS_MAGIC = b"MCMS"
WEIGHTS_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    """Architecture knobs.  base_width must be divisible by 8 (the stripe
    attention projects to width/8 channels and the fusion chunks by 4)."""

    base_width: int = 32
    hf_blocks: int = 3
    lf_blocks: int = 3
    stage3_blocks: int = 28
    use_mssa: bool = True
    use_gff: bool = True
    freq_tau: float = 0.1

    def validate(self) -> None:
        if self.base_width < 8 or self.base_width % 8 != 0:
            raise ValueError(f"base_width must be a positive multiple of 8, got {self.base_width}")
        for name in ("hf_blocks", "lf_blocks", "stage3_blocks"):
            v = getattr(self, name)
            if v < 1:
                raise ValueError(f"{name} must be >= 1, got {v}")
        if not 0.0 <= self.freq_tau <= 2.0:
            raise ValueError(f"freq_tau must be in [0, 2], got {self.freq_tau}")

    def stage3_split(self) -> tuple[int, int, int]:
        """Distribute encoder blocks over the three levels, remainder to the
        deepest one (e.g. 28 -> 9/9/10, 4 -> 1/1/2)."""
        base = self.stage3_blocks // 3
        return base, base, self.stage3_blocks - 2 * base


def _conv_init(rng, out_c, in_c, k, dtype, zero=False):
    if zero:
        w = np.zeros((out_c, in_c, k, k), dtype=dtype)
    else:
        bound = 1.0 / np.sqrt(in_c * k * k)
        w = rng.uniform(-bound, bound, size=(out_c, in_c, k, k)).astype(dtype)
    return (Tensor(w, requires_grad=True),
            Tensor(np.zeros(out_c, dtype=dtype), requires_grad=True))


class Block:
    """Gated conv block: channel norm, pointwise expand to 2c, depthwise
    3x3, split-and-multiply gate back to c, pointwise projection, residual.
    With all weights zero the residual path vanishes and the block is the
    identity."""

    def __init__(self, channels: int, rng: np.random.Generator, dtype=np.float32):
        self.channels = channels
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.pw1_w, self.pw1_b = _conv_init(rng, 2 * channels, channels, 1, dtype)
        bound = 1.0 / np.sqrt(9)
        self.dw_w = Tensor(rng.uniform(-bound, bound, size=(2 * channels, 1, 3, 3)).astype(dtype),
                           requires_grad=True)
        self.dw_b = Tensor(np.zeros(2 * channels, dtype=dtype), requires_grad=True)
        self.pw2_w, self.pw2_b = _conv_init(rng, channels, channels, 1, dtype)

    def named_params(self, prefix: str):
        yield f"{prefix}.norm.gamma", self.gamma
        yield f"{prefix}.norm.beta", self.beta
        yield f"{prefix}.pw1.w", self.pw1_w
        yield f"{prefix}.pw1.b", self.pw1_b
        yield f"{prefix}.dw.w", self.dw_w
        yield f"{prefix}.dw.b", self.dw_b
        yield f"{prefix}.pw2.w", self.pw2_w
        yield f"{prefix}.pw2.b", self.pw2_b

    def forward(self, x: Tensor) -> Tensor:
        c = self.channels
        y = _channel_norm(x, self.gamma, self.beta)
        y = conv2d(y, self.pw1_w, self.pw1_b)
        y = depthwise_conv2d(y, self.dw_w, self.dw_b)
        a, b = chunk(y, 2)
        y = a * b
        y = conv2d(y, self.pw2_w, self.pw2_b)
        return x + y


def _channel_norm(x: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    """Normalize across channels per spatial position, learnable affine."""
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    y = xc / (var + 1e-6).sqrt()
    c = gamma.shape[0]
    return y * gamma.reshape(1, c, 1, 1) + beta.reshape(1, c, 1, 1)


class Branch:
    """One frequency branch: embed, encoder blocks, optional stripe
    attention at the bottleneck, decoder blocks, zero-init residual head."""

    def __init__(self, width: int, n_blocks: int, use_mssa: bool,
                 rng: np.random.Generator, dtype=np.float32):
        self.width = width
        self.embed_w, self.embed_b = _conv_init(rng, width, 3, 3, dtype)
        self.enc = [Block(width, rng, dtype) for _ in range(n_blocks)]
        self.attn = MssaParams(width, rng, dtype) if use_mssa else None
        self.dec = [Block(width, rng, dtype) for _ in range(n_blocks)]
        self.out_w, self.out_b = _conv_init(rng, 3, width, 3, dtype, zero=True)

    def named_params(self, prefix: str):
        yield f"{prefix}.embed.w", self.embed_w
        yield f"{prefix}.embed.b", self.embed_b
        for i, blk in enumerate(self.enc):
            yield from blk.named_params(f"{prefix}.enc{i}")
        if self.attn is not None:
            yield from self.attn.named_params(f"{prefix}.attn")
        for i, blk in enumerate(self.dec):
            yield from blk.named_params(f"{prefix}.dec{i}")
        yield f"{prefix}.out.w", self.out_w
        yield f"{prefix}.out.b", self.out_b

    def forward(self, comp: Tensor):
        """Restore one frequency component.

        Returns (restored, f_e, f_d): the component plus the predicted
        residual, the encoder output, and the decoder feature that the
        head reads.
        """
        x = conv2d(comp, self.embed_w, self.embed_b)
        for blk in self.enc:
            x = blk.forward(x)
        if self.attn is not None:
            x = mssa_forward(x, self.attn)
        f_e = x
        for blk in self.dec:
            x = blk.forward(x)
        f_d = x
        restored = comp + conv2d(f_d, self.out_w, self.out_b)
        return restored, f_e, f_d


class Stage3:
    """Full-image branch: fuses the other branches' decoder features in,
    encodes through three levels (stride-1, then two 2x downsamples),
    concatenates pooled branch encoder features at the bottleneck, and
    decodes with two bilinear 2x upsamples to a zero-init residual head."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, dtype=np.float32):
        w = cfg.base_width
        n1, n2, n3 = cfg.stage3_split()
        self.width = w
        self.embed_w, self.embed_b = _conv_init(rng, w, 3, 3, dtype)
        self.proj_w, self.proj_b = _conv_init(rng, w, w, 3, dtype)
        self.fusion = GffParams(w, rng, dtype) if cfg.use_gff else None
        self.e1 = [Block(w, rng, dtype) for _ in range(n1)]
        self.down1_w, self.down1_b = _conv_init(rng, 2 * w, w, 3, dtype)
        self.e2 = [Block(2 * w, rng, dtype) for _ in range(n2)]
        self.down2_w, self.down2_b = _conv_init(rng, 4 * w, 2 * w, 3, dtype)
        self.e3 = [Block(4 * w, rng, dtype) for _ in range(n3)]
        # bottleneck carries 4w encoder channels + w pooled branch channels
        self.attn = MssaParams(5 * w, rng, dtype) if cfg.use_mssa else None
        self.fuse_w, self.fuse_b = _conv_init(rng, 4 * w, 5 * w, 1, dtype)
        self.up1_w, self.up1_b = _conv_init(rng, 2 * w, 4 * w, 1, dtype)
        self.dec1 = Block(2 * w, rng, dtype)
        self.up2_w, self.up2_b = _conv_init(rng, w, 2 * w, 1, dtype)
        self.dec2 = Block(w, rng, dtype)
        self.out_w, self.out_b = _conv_init(rng, 3, w, 3, dtype, zero=True)

    def named_params(self, prefix: str):
        yield f"{prefix}.embed.w", self.embed_w
        yield f"{prefix}.embed.b", self.embed_b
        yield f"{prefix}.proj.w", self.proj_w
        yield f"{prefix}.proj.b", self.proj_b
        if self.fusion is not None:
            yield from self.fusion.named_params(f"{prefix}.gff")
        for i, blk in enumerate(self.e1):
            yield from blk.named_params(f"{prefix}.e1.{i}")
        yield f"{prefix}.down1.w", self.down1_w
        yield f"{prefix}.down1.b", self.down1_b
        for i, blk in enumerate(self.e2):
            yield from blk.named_params(f"{prefix}.e2.{i}")
        yield f"{prefix}.down2.w", self.down2_w
        yield f"{prefix}.down2.b", self.down2_b
        for i, blk in enumerate(self.e3):
            yield from blk.named_params(f"{prefix}.e3.{i}")
        if self.attn is not None:
            yield from self.attn.named_params(f"{prefix}.attn")
        yield f"{prefix}.fuse.w", self.fuse_w
        yield f"{prefix}.fuse.b", self.fuse_b
        yield f"{prefix}.up1.w", self.up1_w
        yield f"{prefix}.up1.b", self.up1_b
        yield from self.dec1.named_params(f"{prefix}.dec1")
        yield f"{prefix}.up2.w", self.up2_w
        yield f"{prefix}.up2.b", self.up2_b
        yield from self.dec2.named_params(f"{prefix}.dec2")
        yield f"{prefix}.out.w", self.out_w
        yield f"{prefix}.out.b", self.out_b


class McmsModel:
    """The full three-branch model.  Construct through :func:`init_params`."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator, dtype=np.float32):
        config.validate()
        self.config = config
        self.dtype = np.dtype(dtype)
        self.hf = Branch(config.base_width, config.hf_blocks, config.use_mssa, rng, dtype)
        self.lf = Branch(config.base_width, config.lf_blocks, config.use_mssa, rng, dtype)
        self.stage3 = Stage3(config, rng, dtype)

    def named_params(self):
        yield from self.hf.named_params("hf")
        yield from self.lf.named_params("lf")
        yield from self.stage3.named_params("stage3")

    def params(self) -> dict:
        return dict(self.named_params())

    def param_count(self) -> int:
        return sum(t.data.size for _, t in self.named_params())


def init_params(config: ModelConfig, seed: int, dtype=np.float32) -> McmsModel:
    """Fresh model: fan-in-scaled uniform conv weights, zero biases, and
    zero-initialized output heads (so the model starts as the identity).
    Deterministic for a given seed."""
    rng = np.random.default_rng(seed)
    return McmsModel(config, rng, dtype)


def fuse_stage3(i_in: Tensor, f_hf_e: Tensor, f_lf_e: Tensor,
                f_hf_d: Tensor, f_lf_d: Tensor, model: McmsModel) -> Tensor:
    """Produce the stage-three bottleneck feature.

    The blurry image is embedded and fused with the summed branch decoder
    features, encoded through the three levels, then concatenated with
    4x-pooled summed branch encoder features.
    """
    s3 = model.stage3
    f_o = f_hf_d + f_lf_d
    lifted = conv2d(i_in, s3.embed_w, s3.embed_b)
    projected = conv2d(f_o, s3.proj_w, s3.proj_b)
    if s3.fusion is not None:
        i0 = gff_forward(lifted, projected, s3.fusion)
    else:
        i0 = lifted + projected
    x = i0
    for blk in s3.e1:
        x = blk.forward(x)
    x = conv2d(x, s3.down1_w, s3.down1_b, stride=2)
    for blk in s3.e2:
        x = blk.forward(x)
    x = conv2d(x, s3.down2_w, s3.down2_b, stride=2)
    for blk in s3.e3:
        x = blk.forward(x)
    pooled = avgpool2d(f_lf_e + f_hf_e, 4)
    return concat([x, pooled])


def _decode_stage3(f_e: Tensor, model: McmsModel) -> Tensor:
    s3 = model.stage3
    if s3.attn is not None:
        f_e = mssa_forward(f_e, s3.attn)
    x = conv2d(f_e, s3.fuse_w, s3.fuse_b)
    x = upsample2x(conv2d(x, s3.up1_w, s3.up1_b))
    x = s3.dec1.forward(x)
    x = upsample2x(conv2d(x, s3.up2_w, s3.up2_b))
    x = s3.dec2.forward(x)
    return conv2d(x, s3.out_w, s3.out_b)


def mcms_forward(b, model: McmsModel, mask: FrequencyMask):
    """Run the full model on a blurry batch.

    ``b`` is a Tensor or array of shape (n, 3, h, w) with h, w divisible
    by 32.  Returns (restored, restored_hf, restored_lf); nothing is
    clamped here so the tensors stay loss-friendly.
    """
    b_t = b if isinstance(b, Tensor) else Tensor(b)
    if b_t.ndim != 4 or b_t.shape[1] != 3:
        raise ValueError(f"expected an (n, 3, h, w) batch, got {b_t.shape}")
    n, _, h, w = b_t.shape
    if h % 32 != 0 or w % 32 != 0:
        raise ValueError(f"spatial dims must be divisible by 32, got ({h}, {w})")
    if mask.shape != (h, w):
        raise ValueError(f"mask shape {mask.shape} does not match input ({h}, {w})")

    hf_np, lf_np = split_hf_lf(b_t.data, mask)
    hf = Tensor(hf_np.astype(b_t.dtype, copy=False))
    lf = Tensor(lf_np.astype(b_t.dtype, copy=False))

    restored_hf, f_hf_e, f_hf_d = model.hf.forward(hf)
    restored_lf, f_lf_e, f_lf_d = model.lf.forward(lf)
    f_e = fuse_stage3(b_t, f_hf_e, f_lf_e, f_hf_d, f_lf_d, model)
    restored = b_t + _decode_stage3(f_e, model)
    return restored, restored_hf, restored_lf


# -- weight files ------------------------------------------------------------------


class WeightsError(ValueError):
    """Raised for malformed, truncated, or mismatched weight files."""


def save_weights(model: McmsModel, path: str) -> None:
    """Write every parameter as a self-describing float32 record."""
    with open(path, "wb") as fh:
        fh.write(WEIGHTS_MAGIC)
        fh.write(struct.pack("<I", WEIGHTS_VERSION))
        for name, t in model.named_params():
            nb = name.encode("utf-8")
            fh.write(struct.pack("<I", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<I", t.data.ndim))
            for d in t.data.shape:
                fh.write(struct.pack("<I", d))
            fh.write(np.ascontiguousarray(t.data, dtype="<f4").tobytes())


def _read_exact(fh, n: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise WeightsError(f"truncated weight file while reading {what}")
    return buf


def load_weights(path: str, config: ModelConfig, dtype=np.float32) -> McmsModel:
    """Rebuild a model from a weight file written by :func:`save_weights`.

    The config must describe the same architecture the file was saved
    from; any missing, extra, or reshaped tensor is a structured error
    naming the offender.
    """
    records = {}
    order = []
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4, "magic")
        if magic != WEIGHTS_MAGIC:
            raise WeightsError(f"bad magic {magic!r}, expected {WEIGHTS_MAGIC!r}")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
        if version != WEIGHTS_VERSION:
            raise WeightsError(f"unsupported weight format version {version}")
        while True:
            head = fh.read(4)
            if not head:
                break
            if len(head) != 4:
                raise WeightsError("truncated weight file while reading a record header")
            (name_len,) = struct.unpack("<I", head)
            name = _read_exact(fh, name_len, "tensor name").decode("utf-8")
            (rank,) = struct.unpack("<I", _read_exact(fh, 4, f"rank of {name}"))
            dims = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank, f"dims of {name}"))
            count = int(np.prod(dims)) if rank else 1
            payload = _read_exact(fh, 4 * count, f"payload of {name}")
            records[name] = np.frombuffer(payload, dtype="<f4").reshape(dims)
            order.append(name)

    model = init_params(config, seed=0, dtype=dtype)
    expected = list(model.named_params())
    expected_names = [n for n, _ in expected]
    missing = [n for n in expected_names if n not in records]
    if missing:
        raise WeightsError(f"weight file is missing tensor {missing[0]!r}")
    extra = [n for n in order if n not in set(expected_names)]
    if extra:
        raise WeightsError(f"weight file has unexpected tensor {extra[0]!r}")
    for name, t in expected:
        rec = records[name]
        if tuple(rec.shape) != t.data.shape:
            raise WeightsError(
                f"shape mismatch for {name!r}: file has {tuple(rec.shape)}, "
                f"model wants {t.data.shape}")
        t.data = np.ascontiguousarray(rec.astype(dtype, copy=False))
    return model
