"""Randomised property suites shared by the CLI and the acceptance tests.

Each suite returns a :class:`SuiteResult` whose rows are
``(suite, trial, verdict, slack)``; ``verdict`` is ``pass``, ``fail`` or
``inconclusive`` and ``slack`` is the suite's per-trial statistic.
"""

import logging
from dataclasses import dataclass, field

import numpy as np

from .attention import multi_head_concat, multi_head_sum, filter_subspace, graph_conv_forward, init_attention_params
from .attention import single_head_attention
from .coeff import RESIDUAL_ZERO, SubspaceCoefficient, coeff_attention_forward
from .hull import DEFAULT_TOL, find_expansion_witness, random_instance, verify_baseline_bounded
from .tensor import Matrix, Tape, finite_difference_grad, mse_loss, no_tape, relative_error

log = logging.getLogger(__name__)

SUITES = ("equivalence", "gradient", "bounded", "containment", "expansion")


@dataclass
class SuiteResult:
    name: str
    rows: list = field(default_factory=list)
    worst: float = 0.0

    @property
    def trials(self):
        return len(self.rows)

    @property
    def passed(self):
        return sum(1 for r in self.rows if r[2] == "pass")

    @property
    def inconclusive(self):
        return sum(1 for r in self.rows if r[2] == "inconclusive")

    @property
    def failed(self):
        return sum(1 for r in self.rows if r[2] == "fail")


def equivalence_suite(trials, rng, tol=1e-10):
    """Concat, per-head-sum and graph-convolution forms agree."""
    res = SuiteResult("equivalence")
    for t in range(trials):
        heads = int(rng.choice([1, 2, 4]))
        n = int(rng.integers(1, 17))
        c_in = int(rng.integers(1, 9))
        c_out = heads * int(rng.integers(1, 4))
        x = Matrix(rng.normal(size=(n, c_in)))
        p = init_attention_params(c_in, c_out, heads, rng, std=1.0)
        with no_tape():
            a = multi_head_concat(x, p).data
            b = multi_head_sum(x, p).data
            c = graph_conv_forward(x, filter_subspace(x, p), p.vo_weights()).data
        dev = float(max(np.max(np.abs(a - b)), np.max(np.abs(a - c)), np.max(np.abs(b - c))))
        res.worst = max(res.worst, dev)
        res.rows.append(("equivalence", t, "pass" if dev < tol else "fail", dev))
    return res


def _grad_error(loss_fn, params):
    """Worst relative error between tape gradients and central differences."""
    with Tape() as tape:
        loss = loss_fn()
    grads = tape.backward(loss, params)
    worst = 0.0
    for p in params:
        saved = p.data

        def f(m, p=p):
            p._assign(m.data)
            return loss_fn()

        try:
            num = finite_difference_grad(f, Matrix(saved), eps=2e-3, order=4)
        finally:
            p._assign(saved)
        worst = max(worst, relative_error(grads[p], num))
    return worst


def gradient_instance(rng):
    """Loss closures for one random instance: single-head, multi-head, coefficient layer."""
    heads = int(rng.choice([1, 2]))
    n = int(rng.integers(2, 6))
    c_in = int(rng.integers(1, 4))
    c_out = heads * int(rng.integers(1, 3))
    x = Matrix(rng.normal(size=(n, c_in)))
    target = Matrix(rng.normal(size=(n, c_out)))
    p = init_attention_params(c_in, c_out, heads, rng, std=0.7)
    single = [Matrix(rng.normal(0, 0.7, (c_in, c_out))) for _ in range(3)]
    c = SubspaceCoefficient(Matrix(rng.normal(0, 0.5, (heads, heads))), RESIDUAL_ZERO)
    for m in [*p.matrices(), *single, c.alpha]:
        m.requires_grad = True
    return [
        (lambda: mse_loss(single_head_attention(x, *single), target), single),
        (lambda: mse_loss(multi_head_sum(x, p), target), p.matrices()),
        (lambda: mse_loss(coeff_attention_forward(x, p, c), target), [*p.matrices(), c.alpha]),
    ]


def gradient_suite(trials, rng, tol=1e-5):
    res = SuiteResult("gradient")
    for t in range(trials):
        err = max(_grad_error(fn, ps) for fn, ps in gradient_instance(rng))
        res.worst = max(res.worst, err)
        res.rows.append(("gradient", t, "pass" if err < tol else "fail", err))
    return res


def _hull_rows(name, report):
    res = SuiteResult(name)
    for t, verdict, slack in report.rows:
        v = "pass" if verdict == "member" else ("inconclusive" if verdict == "inconclusive" else "fail")
        res.rows.append((name, t, v, slack))
    res.worst = report.max_slack
    return res


def bounded_suite(trials, rng, tol=DEFAULT_TOL, n=8, d=2, heads=2):
    """Every plain multi-head output row lies in the Minkowski sum of per-head hulls."""
    return _hull_rows("bounded", verify_baseline_bounded(trials, n, d, d, heads, rng, tol))


def containment_suite(trials, rng, tol=DEFAULT_TOL, n=8, d=2, heads=2):
    """The same with the coefficient layer at alpha' = I."""
    rep = verify_baseline_bounded(trials, n, d, d, heads, rng, tol, coefficient=np.eye(heads))
    return _hull_rows("containment", rep)


def expansion_suite(trials, rng, tol=DEFAULT_TOL, n=8, d=2, heads=2, budget=64):
    """A certified escaping row exists for some alpha'; ``slack`` is its separation margin."""
    res = SuiteResult("expansion")
    for t in range(trials):
        x, p = random_instance(rng, n, d, d, heads)
        w = find_expansion_witness(x, p, rng, budget, tol)
        if w.status == "found":
            log.info("expansion trial %d: alpha'=%s row=%d direction=%s slack=%.3e",
                     t, np.round(w.alpha_prime, 3).tolist(), w.row_index,
                     np.round(w.verdict.direction, 4).tolist(), w.verdict.slack)
            res.rows.append(("expansion", t, "pass", w.verdict.slack))
            # for this suite the interesting figure is the thinnest certified margin
            res.worst = w.verdict.slack if res.passed == 1 else min(res.worst, w.verdict.slack)
        else:
            log.info("expansion trial %d: no witness within %d candidates", t, w.tried)
            res.rows.append(("expansion", t, "inconclusive", 0.0))
    return res


SUITE_FUNCS = {
    "equivalence": equivalence_suite,
    "gradient": gradient_suite,
    "bounded": bounded_suite,
    "containment": containment_suite,
    "expansion": expansion_suite,
}


def run_suite(name, trials, rng):
    if name not in SUITE_FUNCS:
        raise ValueError(f"unknown suite {name!r}; expected one of {SUITES}")
    if trials < 1:
        raise ValueError(f"trials must be >= 1, got {trials}")
    return SUITE_FUNCS[name](trials, rng)
