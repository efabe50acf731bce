import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from steercnn import kernels

IMPLS = kernels.implementations()


def loop_im2col(xp, kh, kw):
    B, C, Hp, Wp = xp.shape
    Ho, Wo = Hp - kh + 1, Wp - kw + 1
    out = np.empty((C * kh * kw, B * Ho * Wo))
    for c in range(C):
        for a in range(kh):
            for d in range(kw):
                row = (c * kh + a) * kw + d
                for b in range(B):
                    for y in range(Ho):
                        for x in range(Wo):
                            out[row, (b * Ho + y) * Wo + x] = xp[b, c, y + a, x + d]
    return out


def test_compiled_backend_built():
    assert "cython" in IMPLS, "compiled kernels missing; run pip install -e . --no-build-isolation"
    assert kernels.BACKEND == "cython"


def test_env_forces_fallback():
    code = "from steercnn import kernels; print(kernels.BACKEND)"
    env = dict(os.environ, STEERCNN_KERNELS="python")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"


@pytest.mark.parametrize("name", sorted(IMPLS))
def test_im2col_loop_oracle(name, rng):
    xp = rng.normal(size=(2, 3, 6, 5))
    out = np.empty((3 * 3 * 2, 2 * 4 * 4))
    IMPLS[name].im2col(xp, 3, 2, out)
    np.testing.assert_array_equal(out, loop_im2col(xp, 3, 2))


@pytest.mark.parametrize("name", sorted(IMPLS))
def test_col2im_is_adjoint(name, rng):
    xp = rng.normal(size=(2, 2, 7, 6))
    cols = rng.normal(size=(2 * 3 * 3, 2 * 5 * 4))
    back = np.zeros_like(xp)
    IMPLS[name].col2im(cols, 3, 3, back)
    assert (loop_im2col(xp, 3, 3) * cols).sum() == pytest.approx((xp * back).sum(), rel=1e-12)


@given(st.integers(0, 2**31 - 1), st.integers(1, 3), st.integers(1, 3), st.integers(1, 4),
       st.booleans())
def test_backend_parity(seed, B, C, half, ties):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(B, C, 2 * half + 2, 2 * half + 2))
    if ties:
        x = np.round(x)
    results = {}
    for name, impl in IMPLS.items():
        out = np.empty((B, C, half + 1, half + 1))
        arg = np.empty(out.shape, dtype=np.int8)
        impl.max_pool2_forward(x, out, arg)
        dx = np.zeros_like(x)
        impl.max_pool2_backward(np.ones_like(out), arg, dx)
        cols = np.empty((C * 9, B * (2 * half) ** 2))
        impl.im2col(x, 3, 3, cols)
        acc = np.zeros_like(x)
        impl.col2im(cols, 3, 3, acc)
        results[name] = (out, arg, dx, cols, acc)
    ref = results["python"]
    for got in results.values():
        for a, b in zip(got, ref):
            np.testing.assert_array_equal(a, b)
