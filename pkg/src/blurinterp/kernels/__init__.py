"""Backend dispatch for the conv / resize inner loops.

The active lane is chosen once at import from the ``BLURINTERP_BACKEND``
environment variable:

* ``auto``  (default) use the numba lane if numba imports and compiles,
  otherwise silently fall back to pure numpy
* ``numba`` require the numba lane; raise if it is unavailable
* ``numpy`` force the pure-numpy lane

Both lanes implement the same four functions with identical semantics
(``conv2d_fwd``, ``conv2d_bwd_x``, ``conv2d_bwd_w``, ``resize_bilinear_fwd``,
``resize_bilinear_bwd``); the numpy lane is the reference and the test suite
checks the numba lane against it.
"""

import os

from blurinterp.errors import ConfigError
from blurinterp.kernels import numpy_backend


def _load(choice):
    if choice == "numpy":
        return numpy_backend, "numpy"
    if choice == "numba":
        from blurinterp.kernels import numba_backend
        return numba_backend, "numba"
    if choice == "auto":
        try:
            from blurinterp.kernels import numba_backend
            return numba_backend, "numba"
        except Exception:
            return numpy_backend, "numpy"
    raise ConfigError(
        f"BLURINTERP_BACKEND must be 'auto', 'numba' or 'numpy', got {choice!r}")


_impl, backend_name = _load(os.environ.get("BLURINTERP_BACKEND", "auto").lower())

conv2d_fwd = _impl.conv2d_fwd
conv2d_bwd_x = _impl.conv2d_bwd_x
conv2d_bwd_w = _impl.conv2d_bwd_w
resize_bilinear_fwd = _impl.resize_bilinear_fwd
resize_bilinear_bwd = _impl.resize_bilinear_bwd

__all__ = [
    "backend_name",
    "conv2d_fwd",
    "conv2d_bwd_x",
    "conv2d_bwd_w",
    "resize_bilinear_fwd",
    "resize_bilinear_bwd",
]
