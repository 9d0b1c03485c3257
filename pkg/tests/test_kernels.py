import os
import subprocess
import sys

import numpy as np
from hypothesis import given, strategies as st

from coefflab import _kernels as K


@given(st.integers(1, 40), st.integers(1, 16), st.integers(0, 2**32 - 1))
def test_softmax_paths_agree(rows, cols, seed):
    x = np.random.default_rng(seed).normal(0, 5, size=(rows, cols))
    assert np.max(np.abs(K.softmax_rows_numba(x) - K.softmax_rows_numpy(x))) < 1e-14


@given(st.integers(1, 40), st.integers(1, 16), st.integers(0, 2**32 - 1))
def test_softmax_grad_paths_agree(rows, cols, seed):
    r = np.random.default_rng(seed)
    y = K.softmax_rows_numpy(r.normal(size=(rows, cols)))
    g = r.normal(size=(rows, cols))
    assert np.max(np.abs(K.softmax_rows_grad_numba(y, g) - K.softmax_rows_grad_numpy(y, g))) < 1e-14


@given(st.integers(1, 6), st.integers(1, 50), st.integers(0, 2**32 - 1))
def test_mix_paths_agree_bitwise(h, m, seed):
    r = np.random.default_rng(seed)
    c, a = r.normal(size=(h, h)), r.normal(size=(h, m))
    # same accumulation order on both paths
    assert np.array_equal(K.mix_numba(c, a), K.mix_numpy(c, a))


@given(st.integers(1, 6), st.integers(1, 50), st.integers(0, 2**32 - 1))
def test_mix_grad_paths_agree(h, m, seed):
    r = np.random.default_rng(seed)
    c, a, g = r.normal(size=(h, h)), r.normal(size=(h, m)), r.normal(size=(h, m))
    for x, y in zip(K.mix_grad_numba(c, a, g), K.mix_grad_numpy(c, a, g)):
        assert np.max(np.abs(x - y)) < 1e-12


def test_batched_shapes_survive():
    x = np.random.default_rng(0).normal(size=(3, 4, 5))
    assert K.softmax_rows_numba(x).shape == (3, 4, 5)


def test_env_flag_selects_numpy():
    env = dict(os.environ, COEFFLAB_DISABLE_NUMBA="1")
    out = subprocess.run(
        [sys.executable, "-c", "from coefflab import _kernels as K; print(K.BACKEND, K.softmax_rows is K.softmax_rows_numpy)"],
        env=env, capture_output=True, text=True, check=True,
    )
    assert out.stdout.split() == ["numpy", "True"]


def test_default_backend_is_numba_when_available():
    env = {k: v for k, v in os.environ.items() if k != "COEFFLAB_DISABLE_NUMBA"}
    out = subprocess.run(
        [sys.executable, "-c", "from coefflab import _kernels as K; print(K.BACKEND)"],
        env=env, capture_output=True, text=True, check=True,
    )
    assert out.stdout.strip() == ("numba" if K.HAVE_NUMBA else "numpy")
