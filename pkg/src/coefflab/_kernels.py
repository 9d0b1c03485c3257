"""Hot numeric kernels with a numba path and a pure-numpy fallback.

The numba path is used when numba imports cleanly and the environment
variable ``COEFFLAB_DISABLE_NUMBA`` is unset (or ``0``).  Both paths are
always importable under explicit names so the benchmark and the tests
can compare them directly.
"""

import os

import numpy as np

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

_DISABLED = os.environ.get("COEFFLAB_DISABLE_NUMBA", "0").strip().lower() not in ("", "0", "false", "no")
USE_NUMBA = HAVE_NUMBA and not _DISABLED
BACKEND = "numba" if USE_NUMBA else "numpy"


# ---------------------------------------------------------------------------
# numpy reference path


def softmax_rows_numpy(x):
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_rows_grad_numpy(y, gy):
    return y * (gy - (gy * y).sum(axis=-1, keepdims=True))


def mix_numpy(coeff, atoms):
    """out[h] = sum_i coeff[h, i] * atoms[i], accumulated in index order."""
    n_out, n_in = coeff.shape
    out = np.empty((n_out,) + atoms.shape[1:])
    for h in range(n_out):
        acc = coeff[h, 0] * atoms[0]
        for i in range(1, n_in):
            acc = acc + coeff[h, i] * atoms[i]
        out[h] = acc
    return out


def mix_grad_numpy(coeff, atoms, g):
    n_in = atoms.shape[0]
    flat_a = atoms.reshape(n_in, -1)
    flat_g = g.reshape(g.shape[0], -1)
    g_coeff = flat_g @ flat_a.T
    g_atoms = (coeff.T @ flat_g).reshape(atoms.shape)
    return g_coeff, g_atoms


# ---------------------------------------------------------------------------
# numba path (operates on 2-D row views; callers reshape)

if HAVE_NUMBA:

    @njit(cache=True)
    def _softmax_rows_nb(x):
        rows, cols = x.shape
        out = np.empty_like(x)
        for r in range(rows):
            m = x[r, 0]
            for j in range(1, cols):
                if x[r, j] > m:
                    m = x[r, j]
            s = 0.0
            for j in range(cols):
                e = np.exp(x[r, j] - m)
                out[r, j] = e
                s += e
            for j in range(cols):
                out[r, j] = out[r, j] / s
        return out

    @njit(cache=True)
    def _softmax_rows_grad_nb(y, gy):
        rows, cols = y.shape
        out = np.empty_like(y)
        for r in range(rows):
            dot = 0.0
            for j in range(cols):
                dot += gy[r, j] * y[r, j]
            for j in range(cols):
                out[r, j] = y[r, j] * (gy[r, j] - dot)
        return out

    @njit(cache=True)
    def _mix_nb(coeff, atoms):
        n_out, n_in = coeff.shape
        m = atoms.shape[1]
        out = np.empty((n_out, m))
        for h in range(n_out):
            for k in range(m):
                acc = coeff[h, 0] * atoms[0, k]
                for i in range(1, n_in):
                    acc = acc + coeff[h, i] * atoms[i, k]
                out[h, k] = acc
        return out

    @njit(cache=True)
    def _mix_grad_nb(coeff, atoms, g):
        # both products are GEMMs; numba hands np.dot to BLAS
        g_coeff = np.dot(g, np.ascontiguousarray(atoms.T))
        g_atoms = np.dot(np.ascontiguousarray(coeff.T), g)
        return g_coeff, g_atoms

    def softmax_rows_numba(x):
        x2 = np.ascontiguousarray(x, dtype=np.float64).reshape(-1, x.shape[-1])
        return _softmax_rows_nb(x2).reshape(x.shape)

    def softmax_rows_grad_numba(y, gy):
        y2 = np.ascontiguousarray(y, dtype=np.float64).reshape(-1, y.shape[-1])
        g2 = np.ascontiguousarray(gy, dtype=np.float64).reshape(-1, y.shape[-1])
        return _softmax_rows_grad_nb(y2, g2).reshape(y.shape)

    def mix_numba(coeff, atoms):
        flat = np.ascontiguousarray(atoms, dtype=np.float64).reshape(atoms.shape[0], -1)
        out = _mix_nb(np.ascontiguousarray(coeff, dtype=np.float64), flat)
        return out.reshape((coeff.shape[0],) + atoms.shape[1:])

    def mix_grad_numba(coeff, atoms, g):
        flat_a = np.ascontiguousarray(atoms, dtype=np.float64).reshape(atoms.shape[0], -1)
        flat_g = np.ascontiguousarray(g, dtype=np.float64).reshape(g.shape[0], -1)
        g_coeff, g_atoms = _mix_grad_nb(np.ascontiguousarray(coeff, dtype=np.float64), flat_a, flat_g)
        return g_coeff, g_atoms.reshape(atoms.shape)

else:  # pragma: no cover
    softmax_rows_numba = softmax_rows_numpy
    softmax_rows_grad_numba = softmax_rows_grad_numpy
    mix_numba = mix_numpy
    mix_grad_numba = mix_grad_numpy


if USE_NUMBA:
    softmax_rows = softmax_rows_numba
    softmax_rows_grad = softmax_rows_grad_numba
    mix = mix_numba
else:
    softmax_rows = softmax_rows_numpy
    softmax_rows_grad = softmax_rows_grad_numpy
    mix = mix_numpy
# two small GEMMs: the BLAS-backed numpy version wins under either backend
# (see benchmarks/bench_kernels.py), so it is always selected
mix_grad = mix_grad_numpy
