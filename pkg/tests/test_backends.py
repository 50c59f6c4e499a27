import math
import os
import subprocess
import sys

import numpy as np
import pytest

from groundloc import _kernels_py
from groundloc._backend import BACKEND, available_backends

compiled = available_backends().get("cython")
needs_ext = pytest.mark.skipif(compiled is None, reason="compiled kernels not built")


@needs_ext
def test_compiled_backend_selected_by_default():
    assert BACKEND == "cython"


def test_pure_python_override():
    env = dict(os.environ, GROUNDLOC_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", "from groundloc._backend import BACKEND; print(BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"


@needs_ext
@pytest.mark.parametrize("args", [(math.cos(0.02), math.sin(0.02), 1.5, -2.0), (1.0, 0.0, 3.0, 0.0),
                                  (math.cos(-1.2), math.sin(-1.2), 0.3, 0.7)])
def test_warp_equivalent(args):
    src = np.random.default_rng(0).random((2, 37, 29))
    assert np.array_equal(compiled.warp(src, *args), _kernels_py.warp(src, *args))


@needs_ext
def test_bilinear_gather_equivalent():
    rng = np.random.default_rng(1)
    img = rng.random((20, 30))
    rows, cols = rng.uniform(-2, 22, 500), rng.uniform(-2, 32, 500)
    assert np.allclose(compiled.bilinear_gather(img, rows, cols), _kernels_py.bilinear_gather(img, rows, cols),
                       atol=1e-15)


@needs_ext
def test_voxel_bin_equivalent():
    rng = np.random.default_rng(2)
    n = 5000
    args = (rng.integers(0, 12, n), rng.integers(0, 9, n), rng.integers(-1, 3, n), rng.random(n), 9, 12, 3)
    for a, b in zip(compiled.voxel_bin(*args), _kernels_py.voxel_bin(*args)):
        assert np.allclose(a, b, atol=1e-12)


@needs_ext
def test_direct_scores_equivalent():
    rng = np.random.default_rng(3)
    on, mp = rng.standard_normal((16, 16)), rng.standard_normal((26, 26))
    yaw = np.array([-0.02, 0.0, 0.01])
    t = np.arange(-5, 6)
    a = compiled.direct_scores(on, mp, np.cos(yaw), np.sin(yaw), t, t)
    b = _kernels_py.direct_scores(on, mp, np.cos(yaw), np.sin(yaw), t, t)
    assert np.allclose(a, b, rtol=1e-12, atol=1e-12)
