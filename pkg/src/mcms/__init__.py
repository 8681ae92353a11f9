"""Desk-scale blind motion deblurring.

A small, fully inspectable implementation of a frequency-split restoration
network: images are separated into low- and high-frequency components with
an orthonormal DCT, restored by three cooperating encoder-decoder branches,
and the branch features are merged by grouped fusion and multi-scale stripe
attention.  Everything runs on numpy with a hand-rolled reverse-mode tape,
so every gradient can be checked against finite differences.
"""

__version__ = "0.1.0"

from .freq import FrequencyMask, split_hf_lf
from .model import ModelConfig, init_params, load_weights, mcms_forward, save_weights
from .tensor import Tensor, grad_check
from .train_eval import evaluate, psnr, restore_image, ssim, train

__all__ = [
    "FrequencyMask",
    "ModelConfig",
    "Tensor",
    "evaluate",
    "grad_check",
    "init_params",
    "load_weights",
    "mcms_forward",
    "psnr",
    "restore_image",
    "save_weights",
    "split_hf_lf",
    "ssim",
    "train",
    "__version__",
]
