"""Dense float64 matrices with tape-based reverse-mode differentiation.

Only the operations needed by attention and coefficient tuning are
differentiable: ``matmul``, ``softmax_rows``, ``add``, ``scale``,
``transpose``, ``hadamard``, ``mse_loss``, ``sum_all`` and ``mix`` (a
coefficient-weighted combination of equally shaped matrices).

A ``Matrix`` is either a single 2-D matrix or a stack of matrices with a
leading batch axis.  Stacks exist so that a batch of token sequences can
share 2-D parameters; every op acts on the trailing two axes and the
gradient of a 2-D operand used against a stack is summed over the batch.

Usage::

    W = Matrix(rng.normal(size=(3, 2)), requires_grad=True)
    with Tape() as tape:
        loss = mse_loss(matmul(X, W), T)
    grads = tape.backward(loss)
    grads[W]          # Matrix of shape (3, 2)
"""

import math
from collections import namedtuple

import numpy as np

from . import _kernels
from .errors import DimensionError, NumericError, UsageError

__all__ = [
    "Matrix",
    "Tape",
    "Gradients",
    "no_tape",
    "active_tape",
    "as_matrix",
    "matmul",
    "softmax_rows",
    "add",
    "scale",
    "transpose",
    "hadamard",
    "mse_loss",
    "sum_all",
    "mix",
    "backward",
    "finite_difference_grad",
    "relative_error",
]


class Matrix:
    """Immutable float64 matrix (or stack of matrices)."""

    __slots__ = ("data", "requires_grad", "name", "__weakref__")

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim not in (2, 3):
            raise DimensionError(f"Matrix needs 2 or 3 axes, got shape {arr.shape}")
        arr.setflags(write=False)
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name

    @classmethod
    def _wrap(cls, arr):
        # fresh op results only; skips the defensive copy
        m = cls.__new__(cls)
        arr.setflags(write=False)
        m.data = arr
        m.requires_grad = False
        m.name = None
        return m

    def _assign(self, arr):
        # optimizers rebind the buffer in place of the old one; earlier
        # results keep referencing the previous (read-only) array
        arr = np.array(arr, dtype=np.float64)
        if arr.shape != self.data.shape:
            raise DimensionError(f"cannot assign shape {arr.shape} to a {self.data.shape} matrix")
        arr.setflags(write=False)
        self.data = arr

    @classmethod
    def zeros(cls, rows, cols):
        return cls(np.zeros((rows, cols)))

    @classmethod
    def identity(cls, n):
        return cls(np.eye(n))

    @property
    def shape(self):
        return self.data.shape

    @property
    def rows(self):
        return self.data.shape[-2]

    @property
    def cols(self):
        return self.data.shape[-1]

    @property
    def T(self):
        return transpose(self)

    def numpy(self):
        return self.data.copy()

    def item(self):
        if self.data.size != 1:
            raise DimensionError(f"item() needs a 1x1 matrix, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, scale(as_matrix(other), -1.0))

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, other):
        if isinstance(other, (int, float, np.floating)):
            return scale(self, float(other))
        return hadamard(self, other)

    __rmul__ = __mul__

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Matrix(shape={self.shape}{label})"


def as_matrix(x):
    return x if isinstance(x, Matrix) else Matrix(x)


# ---------------------------------------------------------------------------
# tape

Record = namedtuple("Record", "kind inputs output cache")

_TAPE_STACK = []
_SWEEPING = []


def active_tape():
    """Innermost active tape, or None (also None inside ``no_tape``)."""
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class no_tape:
    """Context manager that suspends recording."""

    def __enter__(self):
        _TAPE_STACK.append(None)
        return self

    def __exit__(self, *exc):
        _TAPE_STACK.pop()
        return False


class Gradients(dict):
    """Mapping from parameter Matrix (hashed by identity) to its gradient Matrix."""


class Tape:
    """Ordered record of differentiable ops.

    Ops are recorded only when at least one operand requires a gradient
    or was itself produced by a recorded op.
    """

    def __init__(self):
        self.records = []
        self._tracked = set()
        self._leaves = {}

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc):
        _TAPE_STACK.remove(self)
        return False

    def __len__(self):
        return len(self.records)

    def _wants(self, inputs):
        hit = False
        for m in inputs:
            if m.requires_grad:
                self._leaves.setdefault(id(m), m)
                hit = True
            elif id(m) in self._tracked:
                hit = True
        return hit

    def _record(self, kind, inputs, output, cache=None):
        self.records.append(Record(kind, inputs, output, cache))
        self._tracked.add(id(output))

    def backward(self, loss, params=None):
        """Reverse sweep from a 1x1 ``loss``.

        Returns gradients for ``params`` if given, else for every leaf
        that requires a gradient and was used on this tape.  Parameters
        with no path to the loss get all-zero gradients.
        """
        if loss.data.size != 1:
            raise UsageError(f"backward needs a scalar (1x1) loss, got shape {loss.shape}")
        if id(loss) not in self._tracked and not loss.requires_grad:
            raise UsageError("loss was not produced on this tape")
        grads = {id(loss): np.ones(loss.shape)}
        _SWEEPING.append(self)
        try:
            self._sweep(grads)
        finally:
            _SWEEPING.pop()
        if params is None:
            params = list(self._leaves.values())
        out = Gradients()
        for p in params:
            g = grads.get(id(p))
            out[p] = Matrix._wrap(np.zeros(p.shape) if g is None else np.array(g, dtype=np.float64))
        return out

    def _sweep(self, grads):
        # buffers allocated here may be accumulated into in place; anything
        # returned by a backward rule may alias another gradient and is not
        owned = set()
        for rec in reversed(self.records):
            g = grads.get(id(rec.output))
            if g is None:
                continue
            if rec.kind == "take_row":
                stack = rec.inputs[0]
                key = id(stack)
                buf = grads.get(key)
                if key not in owned:
                    buf = np.zeros(stack.shape) if buf is None else buf.copy()
                    grads[key] = buf
                    owned.add(key)
                buf[rec.cache[0]] += g.reshape(-1)
                continue
            for inp, gi in zip(rec.inputs, _BACKWARD[rec.kind](rec, g)):
                if gi is None or not (inp.requires_grad or id(inp) in self._tracked):
                    continue
                gi = _unbroadcast(gi, inp.shape)
                key = id(inp)
                prev = grads.get(key)
                if prev is None:
                    grads[key] = gi
                elif key in owned:
                    prev += gi
                else:
                    grads[key] = prev + gi
                    owned.add(key)


def backward(loss, params=None):
    """Differentiate ``loss`` on the innermost active tape."""
    tape = active_tape()
    if tape is None:
        raise UsageError("backward() called with no active tape")
    return tape.backward(loss, params)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    if g.ndim == 3 and len(shape) == 2:
        return g.sum(axis=0)
    if g.ndim == 3 and len(shape) == 3 and shape[0] == 1:
        return g.sum(axis=0, keepdims=True)
    raise DimensionError(f"cannot reduce gradient of shape {g.shape} to {shape}")


def _finish(kind, inputs, arr, cache=None):
    # a sum is non-finite whenever any entry is (or it overflows, which is also an error)
    if not math.isfinite(arr.sum()):
        raise NumericError(f"{kind} produced non-finite values")
    out = Matrix._wrap(arr)
    tape = active_tape()
    if tape is not None and tape._wants(inputs):
        tape._record(kind, inputs, out, cache)
    return out


def _swap(a):
    return np.swapaxes(a, -1, -2)


def _check_batch(kind, a, b):
    if a.data.ndim == 3 and b.data.ndim == 3 and a.shape[0] != b.shape[0]:
        raise DimensionError(f"{kind}: batch sizes differ, {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# ops


def matmul(a, b):
    a, b = as_matrix(a), as_matrix(b)
    if a.cols != b.rows:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    _check_batch("matmul", a, b)
    ad, bd = a.data, b.data
    if ad.ndim == 3 and bd.ndim == 2:
        # one GEMM over the flattened stack instead of one per batch entry
        out = (ad.reshape(-1, ad.shape[2]) @ bd).reshape(ad.shape[0], ad.shape[1], bd.shape[1])
    else:
        out = np.matmul(ad, bd)
    return _finish("matmul", (a, b), out)


def softmax_rows(m):
    m = as_matrix(m)
    y = _kernels.softmax_rows(m.data)
    return _finish("softmax_rows", (m,), y)


def add(a, b):
    a, b = as_matrix(a), as_matrix(b)
    if a.shape[-2:] != b.shape[-2:]:
        raise DimensionError(f"add: shapes {a.shape} and {b.shape} differ")
    _check_batch("add", a, b)
    return _finish("add", (a, b), a.data + b.data)


def scale(a, c):
    a = as_matrix(a)
    c = float(c)
    return _finish("scale", (a,), a.data * c, c)


def transpose(a):
    a = as_matrix(a)
    return _finish("transpose", (a,), np.ascontiguousarray(_swap(a.data)))


def hadamard(a, b):
    a, b = as_matrix(a), as_matrix(b)
    if a.shape[-2:] != b.shape[-2:]:
        raise DimensionError(f"hadamard: shapes {a.shape} and {b.shape} differ")
    _check_batch("hadamard", a, b)
    return _finish("hadamard", (a, b), a.data * b.data)


def mse_loss(pred, target):
    """Mean of squared entry differences, returned as a 1x1 Matrix."""
    pred, target = as_matrix(pred), as_matrix(target)
    if pred.shape != target.shape:
        raise DimensionError(f"mse_loss: shapes {pred.shape} and {target.shape} differ")
    diff = pred.data - target.data
    return _finish("mse", (pred, target), np.array([[np.mean(diff * diff)]]), diff)


def sum_all(a):
    a = as_matrix(a)
    return _finish("sum", (a,), np.array([[a.data.sum()]]))


def mix(coeff, mats):
    """Rows of ``coeff`` linearly combine ``mats``: out[h] = sum_i coeff[h,i] mats[i].

    Returns a list with one Matrix per row of ``coeff``.
    """
    coeff = as_matrix(coeff)
    mats = [as_matrix(m) for m in mats]
    if coeff.data.ndim != 2 or coeff.cols != len(mats):
        raise DimensionError(f"mix: coefficient shape {coeff.shape} does not match {len(mats)} inputs")
    first = mats[0].shape
    for m in mats[1:]:
        if m.shape != first:
            raise DimensionError(f"mix: inputs have shapes {first} and {m.shape}")
    stacked = np.stack([m.data for m in mats])
    combined = _kernels.mix(coeff.data, stacked)
    if not np.all(np.isfinite(combined)):
        raise NumericError("mix produced non-finite values")
    stack_out = Matrix._wrap(combined.reshape(combined.shape[0], -1).copy())
    inputs = (coeff, *mats)
    tape = active_tape()
    recorded = tape is not None and tape._wants(inputs)
    if recorded:
        tape._record("mix", inputs, stack_out, stacked)
    outs = []
    for h in range(combined.shape[0]):
        part = combined[h].copy()
        if recorded:
            outs.append(_finish("take_row", (stack_out,), part, (h, first)))
        else:
            outs.append(Matrix._wrap(part))
    return outs


# ---------------------------------------------------------------------------
# backward rules: each returns one gradient (or None) per input


def _bw_matmul(rec, g):
    a, b = rec.inputs
    ad, bd = a.data, b.data
    if ad.ndim == 3 and bd.ndim == 2:
        g2 = g.reshape(-1, g.shape[-1])
        ga = (g2 @ bd.T).reshape(ad.shape) if _needs(a) else None
        gb = ad.reshape(-1, ad.shape[2]).T @ g2 if _needs(b) else None
        return ga, gb
    ga = np.matmul(g, _swap(bd)) if _needs(a) else None
    gb = np.matmul(_swap(ad), g) if _needs(b) else None
    return ga, gb


def _needs(m):
    tape = _SWEEPING[-1]
    return m.requires_grad or id(m) in tape._tracked


def _bw_softmax(rec, g):
    return (_kernels.softmax_rows_grad(rec.output.data, g),)


def _bw_add(rec, g):
    return g, g


def _bw_scale(rec, g):
    return (g * rec.cache,)


def _bw_transpose(rec, g):
    return (_swap(g),)


def _bw_hadamard(rec, g):
    a, b = rec.inputs
    return g * b.data, g * a.data


def _bw_mse(rec, g):
    diff = rec.cache
    gp = (2.0 / diff.size) * g.reshape(-1)[0] * diff
    return gp, -gp


def _bw_sum(rec, g):
    return (np.full(rec.inputs[0].shape, g.reshape(-1)[0]),)


def _bw_mix(rec, g):
    coeff = rec.inputs[0]
    stacked = rec.cache
    g_coeff, g_atoms = _kernels.mix_grad(coeff.data, stacked, g.reshape((g.shape[0],) + stacked.shape[1:]))
    return (g_coeff, *g_atoms)



_BACKWARD = {
    "matmul": _bw_matmul,
    "softmax_rows": _bw_softmax,
    "add": _bw_add,
    "scale": _bw_scale,
    "transpose": _bw_transpose,
    "hadamard": _bw_hadamard,
    "mse": _bw_mse,
    "sum": _bw_sum,
    "mix": _bw_mix,
}


# ---------------------------------------------------------------------------
# finite differences


def finite_difference_grad(f, param, eps=1e-5, order=2):
    """Central-difference estimate of d f / d param, entry by entry.

    ``f`` receives a Matrix shaped like ``param`` and returns a float (or
    a 1x1 Matrix).  Evaluation happens with recording suspended.

    ``order=2`` is the three-point stencil.  ``order=4`` uses the
    five-point stencil, whose O(eps^4) truncation error allows a larger
    eps and so much less cancellation: at eps=1e-3 the error is near
    1e-13 * |f| instead of 1e-11 * |f|.
    """
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    if order not in (2, 4):
        raise ValueError(f"order must be 2 or 4, got {order}")
    base = np.array(as_matrix(param).data, dtype=np.float64)
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    gflat = grad.reshape(-1)

    def call(arr):
        with no_tape():
            v = f(Matrix(arr))
        v = v.item() if isinstance(v, Matrix) else float(v)
        if not np.isfinite(v):
            raise NumericError("finite_difference_grad: objective returned a non-finite value")
        return v

    def at(k, orig, step):
        flat[k] = orig + step
        return call(base)

    for k in range(flat.size):
        orig = flat[k]
        if order == 2:
            gflat[k] = (at(k, orig, eps) - at(k, orig, -eps)) / (2.0 * eps)
        else:
            d1 = at(k, orig, eps) - at(k, orig, -eps)
            d2 = at(k, orig, 2 * eps) - at(k, orig, -2 * eps)
            gflat[k] = (8.0 * d1 - d2) / (12.0 * eps)
        flat[k] = orig
    return Matrix(grad)


def relative_error(analytic, numeric, floor=1e-8):
    """Largest entry-wise error, relative where the magnitude exceeds ``floor``.

    Entries where both values are below ``floor`` in magnitude are
    compared absolutely.
    """
    a = as_matrix(analytic).data
    n = as_matrix(numeric).data
    if a.shape != n.shape:
        raise DimensionError(f"relative_error: shapes {a.shape} and {n.shape} differ")
    mag = np.maximum(np.abs(a), np.abs(n))
    err = np.abs(a - n)
    rel = np.where(mag < floor, err, err / np.where(mag < floor, 1.0, mag))
    return float(rel.max()) if rel.size else 0.0
