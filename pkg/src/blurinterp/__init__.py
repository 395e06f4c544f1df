"""Joint deblurring and frame interpolation on blurred frame triplets.

The package is organised in layers:

* ``blurinterp.tensor``     reverse-mode autodiff over numpy arrays
* ``blurinterp.kernels``    conv / resize inner loops (numba or numpy lane)
* ``blurinterp.attention``  shifted-window self-attention blocks
* ``blurinterp.network``    the full restoration network and its heads
* ``blurinterp.data``       synthetic blur generation and dataset IO
* ``blurinterp.training``   losses, AdamW, LR schedule, train loops
* ``blurinterp.analysis``   PSNR / SSIM / representation similarity / cost fits
* ``blurinterp.checkpoint`` binary weight container
* ``blurinterp.cli``        command line entry point
"""

from blurinterp.errors import (
    BlurinterpError,
    CheckpointFormatError,
    ConfigError,
    DivergenceError,
    DomainError,
    ModeError,
    ShapeError,
)

__version__ = "0.1.0"

__all__ = [
    "BlurinterpError",
    "CheckpointFormatError",
    "ConfigError",
    "DivergenceError",
    "DomainError",
    "ModeError",
    "ShapeError",
    "__version__",
]
