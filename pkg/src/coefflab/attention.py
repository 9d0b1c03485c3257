"""Multi-head attention in concat, per-head-sum and graph-convolution form.

All three forms compute the same output.  The graph-convolution form
treats each head's attention map as a filter atom over the fully
connected token graph and applies it to the node features ``X W^h``.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ArityError, DimensionError
from .tensor import Matrix, add, as_matrix, matmul, scale, softmax_rows, transpose


@dataclass
class AttentionParams:
    """Per-head query/key/value projections plus the shared output projection.

    ``wq``, ``wk`` and ``wv`` hold one ``C_in x (C_out / H)`` matrix per
    head; ``wo`` is ``C_out x C_out``.  Row block ``h`` of ``wo`` (rows
    ``h*d`` to ``(h+1)*d``) is the slice that head ``h``'s output meets
    in ``Concat[O^1..O^H] W_o``.
    """

    wq: list
    wk: list
    wv: list
    wo: Matrix

    def __post_init__(self):
        self.wq = [as_matrix(w) for w in self.wq]
        self.wk = [as_matrix(w) for w in self.wk]
        self.wv = [as_matrix(w) for w in self.wv]
        self.wo = as_matrix(self.wo)
        heads = len(self.wq)
        if heads == 0 or len(self.wk) != heads or len(self.wv) != heads:
            raise ArityError(
                f"need the same positive number of query, key and value heads, got "
                f"{len(self.wq)}, {len(self.wk)}, {len(self.wv)}"
            )
        co = self.wo.rows
        if self.wo.shape != (co, co):
            raise DimensionError(f"W_o must be square, got {self.wo.shape}")
        if co % heads:
            raise DimensionError(f"C_out={co} is not divisible by H={heads}")
        d = co // heads
        ci = self.wq[0].rows
        for name, ws in (("W_q", self.wq), ("W_k", self.wk), ("W_v", self.wv)):
            for h, w in enumerate(ws):
                if w.shape != (ci, d):
                    raise DimensionError(f"{name}[{h}] has shape {w.shape}, expected {(ci, d)}")

    @property
    def heads(self):
        return len(self.wq)

    @property
    def c_in(self):
        return self.wq[0].rows

    @property
    def c_out(self):
        return self.wo.rows

    @property
    def head_dim(self):
        return self.c_out // self.heads

    def matrices(self):
        return [*self.wq, *self.wk, *self.wv, self.wo]

    def wo_block(self, h):
        """Row block ``h`` of W_o, shape ``d x C_out`` (that is, ``(W_o^h)^T``)."""
        return matmul(_selector(h, self.head_dim, self.c_out), self.wo)

    def vo(self, h):
        """Fused value-output weight ``W^h = W_v^h (W_o^h)^T``, shape ``C_in x C_out``."""
        return matmul(self.wv[h], self.wo_block(h))

    def vo_weights(self):
        return [self.vo(h) for h in range(self.heads)]


def _selector(h, d, co):
    s = np.zeros((d, co))
    s[np.arange(d), h * d + np.arange(d)] = 1.0
    return Matrix(s)


def init_attention_params(c_in, c_out, heads, rng, std=0.02):
    """Gaussian-initialised projections (no biases)."""
    if heads < 1 or c_out % heads:
        raise DimensionError(f"C_out={c_out} is not divisible by H={heads}")
    d = c_out // heads

    def draw(shape):
        return Matrix(rng.normal(0.0, std, size=shape))

    wq = [draw((c_in, d)) for _ in range(heads)]
    wk = [draw((c_in, d)) for _ in range(heads)]
    wv = [draw((c_in, d)) for _ in range(heads)]
    return AttentionParams(wq, wk, wv, draw((c_out, c_out)))


@dataclass
class FilterSubspace:
    """The H filter atoms (attention maps) of one layer for one input."""

    atoms: list
    row_stochastic: bool = field(default=True)

    @property
    def heads(self):
        return len(self.atoms)

    def check(self, tol=1e-12):
        """Raise if an atom that should be row-stochastic is not."""
        if not self.atoms:
            raise ArityError("filter subspace has no atoms")
        n = self.atoms[0].shape
        for h, a in enumerate(self.atoms):
            if a.shape != n:
                raise DimensionError(f"atom {h} has shape {a.shape}, atom 0 has {n}")
            if self.row_stochastic:
                d = a.data
                # closed interval: with logit gaps past ~37 an entry rounds to exactly 1 or 0
                if np.any(d < 0.0) or np.any(d > 1.0):
                    raise ValueError(f"atom {h} has entries outside [0, 1]")
                if np.max(np.abs(d.sum(axis=-1) - 1.0)) > tol:
                    raise ValueError(f"atom {h} rows do not sum to 1")
        return self


def _check_input(x, c_in):
    x = as_matrix(x)
    if x.cols != c_in:
        raise DimensionError(f"X has shape {x.shape} but the projections expect C_in={c_in}")
    return x


def attention_map(x, wq, wk, scaled=False):
    """softmax(X W_q W_k^T X^T); optionally divides logits by sqrt(d)."""
    x, wq, wk = as_matrix(x), as_matrix(wq), as_matrix(wk)
    if wq.shape != wk.shape:
        raise DimensionError(f"W_q {wq.shape} and W_k {wk.shape} must have equal shapes")
    x = _check_input(x, wq.rows)
    logits = matmul(matmul(x, wq), transpose(matmul(x, wk)))
    if scaled:
        logits = scale(logits, 1.0 / np.sqrt(wq.cols))
    return softmax_rows(logits)


def single_head_attention(x, wq, wk, wv, scaled=False):
    x, wv = as_matrix(x), as_matrix(wv)
    if wv.rows != x.cols:
        raise DimensionError(f"W_v has shape {wv.shape} but X has {x.cols} columns")
    return matmul(attention_map(x, wq, wk, scaled), matmul(x, wv))


def multi_head_concat(x, p, scaled=False):
    """Concat[O^1, ..., O^H] W_o."""
    x = _check_input(x, p.c_in)
    d, co = p.head_dim, p.c_out
    concat = None
    for h in range(p.heads):
        head = single_head_attention(x, p.wq[h], p.wk[h], p.wv[h], scaled)
        # placing head h's d columns at offset h*d keeps the op differentiable
        placed = matmul(head, _selector(h, d, co))
        concat = placed if concat is None else add(concat, placed)
    return matmul(concat, p.wo)


def multi_head_sum(x, p, scaled=False):
    """sum_h A^h X W_vo^h."""
    x = _check_input(x, p.c_in)
    out = None
    for h in range(p.heads):
        a = attention_map(x, p.wq[h], p.wk[h], scaled)
        term = matmul(a, matmul(x, p.vo(h)))
        out = term if out is None else add(out, term)
    return out


def filter_subspace(x, p, scaled=False):
    x = _check_input(x, p.c_in)
    return FilterSubspace([attention_map(x, p.wq[h], p.wk[h], scaled) for h in range(p.heads)])


def graph_conv_forward(x, fs, weights):
    """O = sum_h F^h X W^h over the atoms of ``fs``."""
    x = as_matrix(x)
    weights = [as_matrix(w) for w in weights]
    if fs.heads != len(weights):
        raise ArityError(f"filter subspace has {fs.heads} atoms but {len(weights)} weights were given")
    out = None
    for f, w in zip(fs.atoms, weights):
        term = matmul(f, matmul(x, w))
        out = term if out is None else add(out, term)
    return out
