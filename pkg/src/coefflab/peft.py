"""Frozen-backbone tuning harness: linear probing vs coefficient-only tuning.

A synthetic sequence-classification task stands in for few-shot image
classification.  Each sequence has two groups of tokens, tagged by one
of two marker vectors, and within each group one class prototype
dominates.  The backbone is pre-trained on a pretext split built from
its own prototype set, reporting the dominant prototype of both groups.
Downstream sequences use fresh prototypes and the label is the dominant
prototype of group B, so the frozen value projections only partly
cover the new content and the heads must be re-paired to recover it.

Backbone: ``L`` stacked multi-head attention layers, ``X <- MHA(X)``
(optionally residual), followed by mean pooling and a linear head
trained with squared error against centred one-hot targets.
"""

import copy
from dataclasses import dataclass, field

import numpy as np

from .attention import (
    AttentionParams,
    FilterSubspace,
    filter_subspace,
    graph_conv_forward,
    init_attention_params,
)
from .coeff import (
    DIRECT_IDENTITY,
    DIRECT_RANDOM,
    MODES,
    RESIDUAL_ZERO,
    SubspaceCoefficient,
    combine_filters,
    count_coeff_params,
    effective_coefficient,
)
from .errors import NumericError, TrainingError
from .optim import Adam
from .tensor import Matrix, Tape, add, matmul, mse_loss, no_tape, softmax_rows, transpose

LINEAR_PROBE = "linear-probe"
TUNING_MODES = (LINEAR_PROBE, RESIDUAL_ZERO, DIRECT_RANDOM, DIRECT_IDENTITY)
DROPOUT_RATES = (0.0, 0.1, 0.2, 0.4)


# ---------------------------------------------------------------------------
# data


@dataclass
class SyntheticTask:
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    x_pretext: np.ndarray
    y_pretext: np.ndarray
    classes: int
    seed: int


def _balanced_labels(rng, n, classes):
    labels = np.arange(n) % classes
    rng.shuffle(labels)
    return labels


def _sequences(rng, labels, other, protos, markers, n_tokens, noise):
    n, c = labels.size, protos.shape[1]
    g = n_tokens // 2
    dominant = g // 2 + 1
    classes = protos.shape[0]
    x = rng.normal(0.0, noise, size=(n, n_tokens, c))
    for s in range(n):
        perm = rng.permutation(n_tokens)
        for grp, (y, idx) in enumerate(((other[s], perm[:g]), (labels[s], perm[g:2 * g]))):
            rest = [k for k in range(classes) if k != y]
            content = [y] * dominant + list(rng.choice(rest, size=g - dominant))
            x[s, idx] += markers[grp] + protos[content]
    return x


def generate_task(seed, n_tokens=12, c_in=16, classes=4, samples=128, test_samples=None,
                  pretext_samples=None, noise=0.3):
    """Deterministic two-group sequence task.

    ``samples`` sets the training split size (``test_samples`` and
    ``pretext_samples`` default to the same).  Labels are balanced to
    within one per class in every split.
    """
    if samples < classes:
        raise ValueError(f"need samples >= classes, got {samples} < {classes}")
    if n_tokens < 4:
        raise ValueError(f"need at least 4 tokens per sequence, got {n_tokens}")
    test_samples = samples if test_samples is None else test_samples
    pretext_samples = samples if pretext_samples is None else pretext_samples
    rng = np.random.default_rng(seed)
    protos = rng.normal(size=(classes, c_in))
    pretext_protos = rng.normal(size=(classes, c_in))
    markers = rng.normal(size=(2, c_in))

    def split(n, pr):
        y_b = _balanced_labels(rng, n, classes)
        y_a = rng.integers(0, classes, size=n)
        return _sequences(rng, y_b, y_a, pr, markers, n_tokens, noise), y_a, y_b

    x_tr, _, y_tr = split(samples, protos)
    x_te, _, y_te = split(test_samples, protos)
    x_pre, y_pre_a, y_pre_b = split(pretext_samples, pretext_protos)
    y_pre = np.stack([y_pre_a, y_pre_b], axis=1)
    return SyntheticTask(x_tr, y_tr, x_te, y_te, x_pre, y_pre, classes, seed)


def majority_baseline(task):
    counts = np.bincount(task.y_train, minlength=task.classes)
    return float(np.mean(task.y_test == np.argmax(counts)))


# ---------------------------------------------------------------------------
# model


@dataclass
class FrozenBackbone:
    layers: list
    residual: bool = False
    pretext_loss: float = float("nan")
    _cache: list = field(default=None, repr=False, compare=False)

    @property
    def depth(self):
        return len(self.layers)

    @property
    def heads(self):
        return self.layers[0].heads

    @property
    def width(self):
        return self.layers[0].c_out

    def matrices(self):
        return [m for p in self.layers for m in p.matrices()]

    def frozen_cache(self):
        if self._cache is None:
            self._cache = [_frozen_layer(p) for p in self.layers]
        return self._cache

    def fingerprint(self):
        return tuple(m.data.tobytes() for m in self.matrices())


def _pool(n_tokens):
    return Matrix(np.full((1, n_tokens), 1.0 / n_tokens))


def _targets(labels, classes):
    """Centred one-hot rows; a 2-D ``labels`` array concatenates one block per column."""
    labels = labels.reshape(labels.shape[0], -1)
    n, blocks = labels.shape
    t = np.full((n, 1, classes * blocks), -1.0 / classes)
    for b in range(blocks):
        t[np.arange(n), 0, b * classes + labels[:, b]] += 1.0
    return Matrix(t)


def _frozen_layer(p):
    # the backbone never changes after pre-training, so W_q W_k^T and W^h are fixed
    with no_tape():
        qk = [Matrix(wq.data @ wk.data.T) for wq, wk in zip(p.wq, p.wk)]
        vo = [Matrix(w.data) for w in p.vo_weights()]
    return qk, vo


def _frozen_atoms(x, qk):
    xt = transpose(x)
    return FilterSubspace([softmax_rows(matmul(matmul(x, m), xt)) for m in qk])


def backbone_features(x, backbone, coeffs=None, training=False, rng=None, frozen=True):
    """Pooled features after all layers; ``coeffs`` (one per layer) re-mix the heads.

    ``frozen=False`` differentiates through the backbone weights (pre-training).
    """
    cache = backbone.frozen_cache() if frozen else None
    for layer, p in enumerate(backbone.layers):
        if cache is None:
            fs, weights = filter_subspace(x, p), p.vo_weights()
        else:
            qk, weights = cache[layer]
            fs = _frozen_atoms(x, qk)
        if coeffs is not None:
            eff = effective_coefficient(coeffs[layer], training, rng)
            fs = combine_filters(fs, eff.alpha_prime)
        out = graph_conv_forward(x, fs, weights)
        x = add(x, out) if backbone.residual else out
    return matmul(_pool(x.rows), x)


def predict(features, head):
    return matmul(features, head)


def accuracy(scores, labels):
    return float(np.mean(np.argmax(scores.data[:, 0, :], axis=1) == labels))


def build_backbone(task, depth=3, heads=4, width=16, seed=0, pretrain_steps=200, lr=1e-2, init_std=0.25,
                   residual=False):
    """Seeded init plus a brief pre-training pass on the pretext split; returns frozen weights."""
    rng = np.random.default_rng([seed, 1])
    c_in = task.x_pretext.shape[2]
    if c_in != width:
        raise ValueError(f"stacked layers need C_in == C_out, got {c_in} and {width}")
    layers = [init_attention_params(width, width, heads, rng, std=init_std) for _ in range(depth)]
    backbone = FrozenBackbone(layers, residual)
    head = Matrix(np.zeros((width, task.classes * task.y_pretext.shape[1])), requires_grad=True)
    params = [*backbone.matrices(), head]
    for m in params:
        m.requires_grad = True
    opt = Adam(params, lr)
    x = Matrix(task.x_pretext)
    target = _targets(task.y_pretext, task.classes)
    loss_value = float("nan")
    for step in range(pretrain_steps):
        try:
            with Tape() as tape:
                loss = mse_loss(predict(backbone_features(x, backbone, frozen=False), head), target)
        except NumericError as e:
            raise TrainingError(step, float("nan")) from e
        loss_value = loss.item()
        if not np.isfinite(loss_value):
            raise TrainingError(step, loss_value)
        opt.step(tape.backward(loss, params))
    frozen = FrozenBackbone([AttentionParams(
        [Matrix(w.data) for w in p.wq],
        [Matrix(w.data) for w in p.wk],
        [Matrix(w.data) for w in p.wv],
        Matrix(p.wo.data),
    ) for p in backbone.layers], residual, loss_value)
    return frozen


# ---------------------------------------------------------------------------
# tuning


@dataclass
class TuneConfig:
    mode: str = RESIDUAL_ZERO
    dropout_p: float = 0.0
    steps: int = 1000
    lr_alpha: float = 1e-2
    lr_head: float = 1e-2
    seed: int = 0
    train_alpha: bool = True
    # False routes training through the inference branch, where no mask code runs
    use_dropout: bool = True

    def __post_init__(self):
        if self.mode not in TUNING_MODES:
            raise ValueError(f"unknown tuning mode {self.mode!r}; expected one of {TUNING_MODES}")
        if not 0.0 <= self.dropout_p <= 1.0:
            raise ValueError(f"dropout_p must lie in [0, 1], got {self.dropout_p}")
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")


@dataclass
class TuneMetrics:
    mode: str
    dropout_p: float
    seed: int
    train_loss: float
    train_acc: float
    test_loss: float
    test_acc: float
    trainable: int
    loss_curve: list = field(repr=False, default_factory=list)


def _coefficients(backbone, cfg, rng):
    if cfg.mode == LINEAR_PROBE:
        return None
    return [
        SubspaceCoefficient.create(backbone.heads, cfg.mode, cfg.dropout_p, rng=rng)
        for _ in range(backbone.depth)
    ]


def tune(backbone, task, cfg):
    """Train the head (and, unless linear-probing, the per-layer alpha) on a frozen backbone."""
    init_rng = np.random.default_rng([cfg.seed, 2])
    drop_rng = np.random.default_rng([cfg.seed, 3])
    coeffs = _coefficients(backbone, cfg, init_rng)
    head = Matrix(np.zeros((backbone.width, task.classes)), requires_grad=True)
    for m in backbone.matrices():
        m.requires_grad = False
    alphas = [] if coeffs is None or not cfg.train_alpha else [c.alpha for c in coeffs]
    for c in coeffs or []:
        c.alpha.requires_grad = cfg.train_alpha
    opt_head = Adam([head], cfg.lr_head)
    opt_alpha = Adam(alphas, cfg.lr_alpha) if alphas else None
    params = [head, *alphas]

    x_tr, x_te = Matrix(task.x_train), Matrix(task.x_test)
    t_tr, t_te = _targets(task.y_train, task.classes), _targets(task.y_test, task.classes)
    curve = []
    for step in range(cfg.steps):
        try:
            with Tape() as tape:
                feats = backbone_features(x_tr, backbone, coeffs, training=cfg.use_dropout, rng=drop_rng)
                loss = mse_loss(predict(feats, head), t_tr)
        except NumericError as e:
            raise TrainingError(step, float("nan")) from e
        value = loss.item()
        if not np.isfinite(value):
            raise TrainingError(step, value)
        curve.append(value)
        grads = tape.backward(loss, params)
        opt_head.step(grads)
        if opt_alpha is not None:
            opt_alpha.step(grads)

    with no_tape():
        s_tr = predict(backbone_features(x_tr, backbone, coeffs), head)
        s_te = predict(backbone_features(x_te, backbone, coeffs), head)
        metrics = TuneMetrics(
            cfg.mode,
            cfg.dropout_p,
            cfg.seed,
            mse_loss(s_tr, t_tr).item(),
            accuracy(s_tr, task.y_train),
            mse_loss(s_te, t_te).item(),
            accuracy(s_te, task.y_test),
            int(sum(p.data.size for p in params)),
            curve,
        )
    if not np.isfinite(metrics.train_loss):
        raise TrainingError(cfg.steps, metrics.train_loss)
    return metrics


def expected_trainable(backbone, classes, mode):
    head = backbone.width * classes
    if mode == LINEAR_PROBE:
        return head
    return head + count_coeff_params(backbone.heads, backbone.depth)


# ---------------------------------------------------------------------------
# ablation grid


@dataclass
class HarnessConfig:
    """Fixed harness budget shared by every grid cell."""

    n_tokens: int = 12
    width: int = 16
    heads: int = 4
    depth: int = 3
    classes: int = 4
    samples: int = 128
    test_samples: int = 256
    pretext_samples: int = 128
    noise: float = 0.3
    pretrain_steps: int = 200
    pretrain_lr: float = 1e-2
    init_std: float = 0.25
    # plain stacked layers; a residual stream lets the probe bypass the attention
    residual: bool = False
    steps: int = 1000
    lr_alpha: float = 1e-2
    lr_head: float = 1e-2


def setup(seed, hc=None):
    hc = hc or HarnessConfig()
    task = generate_task(seed, hc.n_tokens, hc.width, hc.classes, hc.samples, hc.test_samples,
                         hc.pretext_samples, hc.noise)
    backbone = build_backbone(task, hc.depth, hc.heads, hc.width, seed, hc.pretrain_steps, hc.pretrain_lr,
                              hc.init_std, hc.residual)
    return task, backbone


def run_cell(task, backbone, mode, p, seed, hc=None):
    hc = hc or HarnessConfig()
    cfg = TuneConfig(mode, p, hc.steps, hc.lr_alpha, hc.lr_head, seed)
    return tune(backbone, task, cfg)


@dataclass
class AblationReport:
    rows: list
    checks: dict

    def cell(self, mode, p, seed):
        for r in self.rows:
            if r.mode == mode and r.dropout_p == p and r.seed == seed:
                return r
        raise KeyError((mode, p, seed))


def ordering_checks(rows, seeds):
    def acc(mode, p, seed):
        for r in rows:
            if r.mode == mode and r.dropout_p == p and r.seed == seed:
                return r.test_acc
        return None

    def count(pred):
        return sum(1 for s in seeds if pred(s))

    checks = {}
    n = len(seeds)
    checks["alpha_beats_linear_probe"] = count(lambda s: acc(RESIDUAL_ZERO, 0.0, s) > acc(LINEAR_PROBE, 0.0, s)) == n
    checks["residual_beats_random"] = count(lambda s: acc(RESIDUAL_ZERO, 0.0, s) > acc(DIRECT_RANDOM, 0.0, s)) * 3 >= 2 * n
    if acc(DIRECT_IDENTITY, 0.0, seeds[0]) is not None:
        checks["residual_ge_identity_ge_random"] = count(
            lambda s: acc(RESIDUAL_ZERO, 0.0, s) >= acc(DIRECT_IDENTITY, 0.0, s) >= acc(DIRECT_RANDOM, 0.0, s)
        ) * 2 > n
    drop = [p for p in DROPOUT_RATES if p > 0]
    if drop and all(acc(RESIDUAL_ZERO, p, seeds[0]) is not None for p in drop):
        checks["some_dropout_ties_or_beats_none"] = count(
            lambda s: max(acc(RESIDUAL_ZERO, p, s) for p in drop) >= acc(RESIDUAL_ZERO, 0.0, s)
        ) * 3 >= 2 * n
    return checks


def run_ablation_grid(seeds=(0,), hc=None, modes=TUNING_MODES, rates=DROPOUT_RATES, progress=None):
    """Every (mode, p, seed) cell on a shared backbone and task per seed."""
    hc = hc or HarnessConfig()
    rows = []
    for seed in seeds:
        task, backbone = setup(seed, hc)
        print_fp = backbone.fingerprint()
        for mode in modes:
            for p in rates:
                rows.append(run_cell(task, backbone, mode, p, seed, hc))
                if progress:
                    progress(rows[-1])
        assert backbone.fingerprint() == print_fp, "backbone weights changed during tuning"
    return AblationReport(rows, ordering_checks(rows, list(seeds)))


def copy_backbone(backbone):
    return copy.deepcopy(backbone)
