"""Subspace-coefficient tuning of multi-head attention.

An H x H coefficient matrix ``alpha`` re-mixes the H attention maps of a
layer: combined atom ``h`` is ``sum_i alpha'[h, i] F^i(X)``.  In the
residual parameterisation the applied matrix is ``alpha' = alpha + I``
(optionally with element-wise dropout on ``alpha``), so a zero ``alpha``
leaves the layer exactly as it was.
"""

import warnings
from dataclasses import dataclass

import numpy as np

from .attention import FilterSubspace, filter_subspace, graph_conv_forward
from .errors import ArityError, DimensionError
from .tensor import Matrix, add, as_matrix, hadamard, mix

RESIDUAL_ZERO = "residual-zero-init"
DIRECT_IDENTITY = "direct-identity-init"
DIRECT_RANDOM = "direct-random-init"
MODES = (RESIDUAL_ZERO, DIRECT_IDENTITY, DIRECT_RANDOM)


class DroppedCoefficientWarning(RuntimeWarning):
    """Every entry of a direct-mode coefficient was dropped."""


@dataclass
class SubspaceCoefficient:
    alpha: Matrix
    mode: str = RESIDUAL_ZERO
    dropout_p: float = 0.0
    rescale: bool = True

    def __post_init__(self):
        self.alpha = as_matrix(self.alpha)
        if self.alpha.data.ndim != 2 or self.alpha.rows != self.alpha.cols:
            raise DimensionError(f"alpha must be square, got shape {self.alpha.shape}")
        if self.mode not in MODES:
            raise ValueError(f"unknown coefficient mode {self.mode!r}; expected one of {MODES}")
        if not 0.0 <= self.dropout_p <= 1.0:
            raise ValueError(f"dropout_p must lie in [0, 1], got {self.dropout_p}")

    @classmethod
    def create(cls, heads, mode=RESIDUAL_ZERO, dropout_p=0.0, rng=None, random_std=None, rescale=True):
        """Initial coefficient for ``mode``; ``direct-random-init`` draws N(0, random_std^2).

        ``random_std`` defaults to ``1/sqrt(heads)``.
        """
        if mode == RESIDUAL_ZERO:
            a = np.zeros((heads, heads))
        elif mode == DIRECT_IDENTITY:
            a = np.eye(heads)
        elif mode == DIRECT_RANDOM:
            if rng is None:
                raise ValueError("direct-random-init needs an rng")
            std = 1.0 / np.sqrt(heads) if random_std is None else random_std
            a = rng.normal(0.0, std, size=(heads, heads))
        else:
            raise ValueError(f"unknown coefficient mode {mode!r}; expected one of {MODES}")
        return cls(Matrix(a, requires_grad=True), mode, dropout_p, rescale)

    @property
    def heads(self):
        return self.alpha.rows

    @property
    def residual(self):
        return self.mode == RESIDUAL_ZERO


@dataclass
class EffectiveCoefficient:
    alpha_prime: Matrix
    mask: np.ndarray = None


def dropout_mask(shape, p, rng, rescale=True):
    """Keep each entry with probability 1-p; survivors become 1/(1-p) if ``rescale``."""
    keep = rng.random(shape) >= p
    if p >= 1.0:
        return np.zeros(shape)
    return keep / (1.0 - p) if rescale else keep.astype(np.float64)


def effective_coefficient(c, training=False, rng=None):
    """The matrix actually applied in the forward pass.

    Residual modes return ``Dropout(alpha; p) + I`` while training and
    ``alpha + I`` otherwise; direct modes skip the ``+ I``.  With
    ``p == 0`` no mask is drawn and ``rng`` is left untouched.
    """
    a = c.alpha
    mask = None
    if training and c.dropout_p > 0.0:
        if rng is None:
            raise ValueError("dropout while training needs an rng")
        mask = dropout_mask(a.shape, c.dropout_p, rng, c.rescale)
        a = hadamard(a, Matrix(mask))
        if not c.residual and not mask.any():
            warnings.warn("all coefficient entries dropped; the layer output is zero", DroppedCoefficientWarning)
    if c.residual:
        a = add(a, Matrix(np.eye(c.heads)))
    return EffectiveCoefficient(a, mask)


def combine_filters(fs, alpha_prime):
    """Atom ``h`` of the result is ``sum_i alpha_prime[h, i] * fs.atoms[i]``."""
    alpha_prime = as_matrix(alpha_prime)
    if alpha_prime.shape != (fs.heads, fs.heads):
        raise ArityError(f"coefficient shape {alpha_prime.shape} does not match {fs.heads} atoms")
    return FilterSubspace(mix(alpha_prime, fs.atoms), row_stochastic=False)


def coeff_attention_forward(x, p, c, training=False, rng=None, scaled=False):
    """O = sum_h sum_i alpha'[h, i] F^i(X) X W^h."""
    if c.heads != p.heads:
        raise ArityError(f"coefficient is {c.heads}x{c.heads} but the layer has {p.heads} heads")
    fs = filter_subspace(x, p, scaled)
    eff = effective_coefficient(c, training, rng)
    return graph_conv_forward(x, combine_filters(fs, eff.alpha_prime), p.vo_weights())


def count_coeff_params(heads, layers):
    """Number of tunable coefficients: H^2 per attention layer."""
    if heads < 1 or layers < 1:
        raise ValueError(f"heads and layers must be >= 1, got {heads}, {layers}")
    return heads * heads * layers


def format_millions(count, places=4):
    """``1728 -> '0.0017M'``."""
    return f"{count / 1e6:.{places}f}M"
