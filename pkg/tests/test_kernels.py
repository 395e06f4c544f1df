"""Numba lane vs numpy lane parity, plus backend selection."""

import subprocess
import sys

import numpy as np
import pytest

from blurinterp.kernels import numba_backend as nb
from blurinterp.kernels import numpy_backend as npb


@pytest.mark.parametrize("stride", [1, 2])
@pytest.mark.parametrize("shape,kshape", [
    ((1, 1, 5, 5), (1, 1, 3, 3)),
    ((2, 3, 9, 11), (5, 3, 3, 3)),
    ((2, 4, 8, 8), (4, 4, 1, 1)),
    ((1, 2, 7, 6), (3, 2, 5, 3)),
])
def test_conv_lanes_agree(shape, kshape, stride):
    rng = np.random.default_rng(hash((shape, kshape, stride)) % 2**32)
    x = rng.standard_normal(shape).astype(np.float32)
    w = rng.standard_normal(kshape).astype(np.float32)
    y_np = npb.conv2d_fwd(x, w, stride)
    y_nb = nb.conv2d_fwd(x, w, stride)
    np.testing.assert_allclose(y_np, y_nb, atol=1e-4)

    dy = rng.standard_normal(y_np.shape).astype(np.float32)
    np.testing.assert_allclose(npb.conv2d_bwd_x(dy, w, shape, stride),
                               nb.conv2d_bwd_x(dy, w, shape, stride), atol=1e-4)
    kh, kw = kshape[2], kshape[3]
    np.testing.assert_allclose(npb.conv2d_bwd_w(dy, x, kh, kw, stride),
                               nb.conv2d_bwd_w(dy, x, kh, kw, stride), atol=1e-4)


@pytest.mark.parametrize("out_hw", [(5, 17), (16, 16), (3, 3), (20, 7)])
def test_resize_lanes_agree(out_hw):
    rng = np.random.default_rng(42)
    x = rng.standard_normal((2, 3, 9, 11)).astype(np.float32)
    oh, ow = out_hw
    y_np = npb.resize_bilinear_fwd(x, oh, ow)
    y_nb = nb.resize_bilinear_fwd(x, oh, ow)
    np.testing.assert_allclose(y_np, y_nb, atol=1e-5)

    dy = rng.standard_normal(y_np.shape).astype(np.float32)
    np.testing.assert_allclose(npb.resize_bilinear_bwd(dy, 9, 11),
                               nb.resize_bilinear_bwd(dy, 9, 11), atol=1e-5)


def test_resize_matches_cv2_convention():
    import cv2
    rng = np.random.default_rng(7)
    x = rng.standard_normal((1, 1, 9, 11)).astype(np.float32)
    ours = npb.resize_bilinear_fwd(x, 5, 17)[0, 0]
    ref = cv2.resize(x[0, 0], (17, 5), interpolation=cv2.INTER_LINEAR)
    np.testing.assert_allclose(ours, ref, atol=1e-6)


def test_resize_adjoint_property():
    # <R x, y> == <x, R^T y> makes bwd the exact adjoint of fwd
    rng = np.random.default_rng(8)
    x = rng.standard_normal((1, 2, 6, 7)).astype(np.float64)
    y = rng.standard_normal((1, 2, 9, 4)).astype(np.float64)
    lhs = float((npb.resize_bilinear_fwd(x, 9, 4) * y).sum())
    rhs = float((x * npb.resize_bilinear_bwd(y, 6, 7)).sum())
    assert lhs == pytest.approx(rhs, rel=1e-12)


@pytest.mark.parametrize("flag,expect", [("numpy", "numpy"), ("numba", "numba")])
def test_backend_env_flag(flag, expect):
    code = ("import blurinterp.kernels as k; print(k.backend_name)")
    out = subprocess.run([sys.executable, "-c", code],
                         env={"PATH": "/usr/bin:/bin", "BLURINTERP_BACKEND": flag},
                         capture_output=True, text=True)
    assert out.returncode == 0, out.stderr
    assert out.stdout.strip() == expect


def test_backend_bad_flag_rejected():
    code = "import blurinterp.kernels"
    out = subprocess.run([sys.executable, "-c", code],
                         env={"PATH": "/usr/bin:/bin",
                              "BLURINTERP_BACKEND": "cuda"},
                         capture_output=True, text=True)
    assert out.returncode != 0
    assert "BLURINTERP_BACKEND" in out.stderr
