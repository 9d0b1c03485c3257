"""Single-layer toy: map an 8-node square graph onto a 'star' target.

The input nodes sit on the boundary of the square [-1, 1]^2; the target
pushes the four edge midpoints out to distance 2.  Three tuning regimes
are compared:

* ``qk-only``       -- train W_q, W_k; outputs stay inside the input hull.
* ``qkv``           -- also train W_v.
* ``qk-plus-alpha`` -- train W_q, W_k and the subspace coefficient alpha
                       (residual, zero init, no dropout) with W_v frozen.

The layer has H=2 heads, C_in = C_out = 2, W_o fixed to the identity and
W_v initialised to the matching identity columns, so with W_v frozen
each output coordinate is a convex combination of input coordinates.
"""

from dataclasses import dataclass, field

import numpy as np

from .attention import AttentionParams, multi_head_sum
from .coeff import RESIDUAL_ZERO, SubspaceCoefficient, coeff_attention_forward
from .errors import NumericError, TrainingError
from .optim import make_optimizer
from .tensor import Matrix, Tape, mse_loss, no_tape

QK_ONLY = "qk-only"
QKV = "qkv"
QK_ALPHA = "qk-plus-alpha"
REGIMES = (QK_ONLY, QKV, QK_ALPHA)

TOY_INPUT = [[-1, 1], [0, 1], [1, 1], [1, 0], [1, -1], [0, -1], [-1, -1], [-1, 0]]
TOY_TARGET = [[-1, 1], [0, 2], [1, 1], [2, 0], [1, -1], [0, -2], [-1, -1], [-2, 0]]


@dataclass(frozen=True)
class ToyInstance:
    x: Matrix
    target: Matrix


def build_toy_instance():
    return ToyInstance(Matrix(TOY_INPUT), Matrix(TOY_TARGET))


@dataclass
class TrainConfig:
    regime: str = QK_ALPHA
    heads: int = 2
    steps: int = 5000
    learning_rate: float = 1e-2
    seed: int = 0
    optimizer: str = "adam"
    init_std: float = 0.02
    value_init: str = "identity"
    # alternative reading of the alpha regime in which W_v is trained too
    alpha_trains_value: bool = False

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise ValueError(f"unknown regime {self.regime!r}; expected one of {REGIMES}")
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.value_init not in ("identity", "gaussian"):
            raise ValueError(f"value_init must be 'identity' or 'gaussian', got {self.value_init!r}")
        if self.heads < 1 or 2 % self.heads:
            raise ValueError(f"the 2-D toy layer needs H dividing 2, got {self.heads}")


@dataclass
class TrainResult:
    regime: str
    final_mse: float
    loss_curve: list
    final_output: Matrix
    max_output_radius: float
    max_abs_coordinate: float
    params: AttentionParams = field(repr=False, default=None)
    coefficient: SubspaceCoefficient = field(repr=False, default=None)


def init_toy_layer(cfg, rng):
    h = cfg.heads
    d = 2 // h
    eye = np.eye(2)
    wq = [Matrix(rng.normal(0.0, cfg.init_std, (2, d))) for _ in range(h)]
    wk = [Matrix(rng.normal(0.0, cfg.init_std, (2, d))) for _ in range(h)]
    if cfg.value_init == "identity":
        wv = [Matrix(eye[:, i * d:(i + 1) * d]) for i in range(h)]
    else:
        wv = [Matrix(rng.normal(0.0, cfg.init_std, (2, d))) for _ in range(h)]
    return AttentionParams(wq, wk, wv, Matrix(eye))


def _trainable(cfg, params, coeff):
    out = [*params.wq, *params.wk]
    if cfg.regime == QKV or (cfg.regime == QK_ALPHA and cfg.alpha_trains_value):
        out += params.wv
    if cfg.regime == QK_ALPHA:
        out.append(coeff.alpha)
    return out


def toy_forward(x, params, coeff, rng=None):
    if coeff is None:
        return multi_head_sum(x, params)
    return coeff_attention_forward(x, params, coeff, training=True, rng=rng)


def train_toy(inst, cfg):
    """Gradient-train the parameters selected by ``cfg.regime``."""
    rng = np.random.default_rng(cfg.seed)
    params = init_toy_layer(cfg, rng)
    coeff = None
    if cfg.regime == QK_ALPHA:
        coeff = SubspaceCoefficient.create(cfg.heads, RESIDUAL_ZERO, dropout_p=0.0)
    trainable = _trainable(cfg, params, coeff)
    for m in params.matrices():
        m.requires_grad = False
    for m in trainable:
        m.requires_grad = True
    opt = make_optimizer(cfg.optimizer, trainable, cfg.learning_rate)

    curve = []
    max_abs = 0.0
    for step in range(cfg.steps):
        try:
            with Tape() as tape:
                out = toy_forward(inst.x, params, coeff, rng)
                loss = mse_loss(out, inst.target)
        except NumericError as e:
            raise TrainingError(step, float("nan")) from e
        value = loss.item()
        if not np.isfinite(value):
            raise TrainingError(step, value)
        curve.append(value)
        max_abs = max(max_abs, float(np.max(np.abs(out.data))))
        opt.step(tape.backward(loss, trainable))

    with no_tape():
        final = toy_forward(inst.x, params, coeff, rng)
        final_mse = mse_loss(final, inst.target).item()
    if not np.isfinite(final_mse):
        raise TrainingError(cfg.steps, final_mse)
    radius = float(np.max(np.abs(final.data)))
    return TrainResult(
        cfg.regime,
        final_mse,
        curve,
        final,
        radius,
        max(max_abs, radius),
        params,
        coeff,
    )


@dataclass
class ComparisonReport:
    results: dict
    ordering_ok: bool

    def ratio_to_best(self, regime):
        return self.results[regime].final_mse / self.results[QK_ALPHA].final_mse


def run_regime_comparison(cfg_base=None, inst=None):
    """Run all three regimes with a shared seed and budget."""
    cfg_base = cfg_base or TrainConfig()
    inst = inst or build_toy_instance()
    results = {}
    for regime in REGIMES:
        cfg = TrainConfig(**{**cfg_base.__dict__, "regime": regime})
        results[regime] = train_toy(inst, cfg)
    best = results[QK_ALPHA].final_mse
    ok = best < results[QKV].final_mse and best < results[QK_ONLY].final_mse
    return ComparisonReport(results, ok)
