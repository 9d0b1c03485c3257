"""Convex-hull and Minkowski-sum membership with checkable certificates.

Membership of ``q`` in ``hull(P^1) + ... + hull(P^H)`` is decided as a
non-negative least-squares problem over per-set convex weights, with
an exact LP feasibility solve as fallback when NNLS stalls.  A
member verdict carries the weights; a non-member verdict carries a
direction ``w`` with ``w.q - sum_h max_n w.P^h_n > 0``, found by a small
linear program and re-checked directly.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linprog, nnls

from .attention import init_attention_params, multi_head_sum
from .coeff import DIRECT_IDENTITY, SubspaceCoefficient, coeff_attention_forward
from .errors import DimensionError
from .tensor import Matrix, no_tape

DEFAULT_TOL = 1e-8


@dataclass
class HullQueryResult:
    member: bool
    weights: list = None
    direction: np.ndarray = None
    slack: float = 0.0
    certified: bool = True

    @property
    def verdict(self):
        if not self.certified:
            return "inconclusive"
        return "member" if self.member else "non-member"


def _points(s):
    arr = s.data if isinstance(s, Matrix) else np.asarray(s, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] < 1:
        raise DimensionError(f"point set must be a non-empty N x d array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("point set has non-finite entries")
    return arr


def support(direction, sets):
    """Support function of the Minkowski sum: sum_h max_n <direction, P^h_n>."""
    return float(sum(np.max(p @ direction) for p in sets))


def separation_slack(q, sets, direction):
    """<direction, q> minus the support value, recomputed from scratch."""
    return float(np.dot(direction, q)) - support(direction, sets)


def reconstruction_error(q, sets, weights):
    recon = sum(w @ p for w, p in zip(weights, sets))
    return float(np.max(np.abs(recon - q)))


def minkowski_query(q, sets, tol=DEFAULT_TOL):
    """Decide ``q in hull(sets[0]) + ... + hull(sets[-1])`` with a certificate."""
    q = np.asarray(q.data if isinstance(q, Matrix) else q, dtype=np.float64).reshape(-1)
    sets = [_points(s) for s in sets]
    if not sets:
        raise DimensionError("need at least one point set")
    dim = q.size
    for s in sets:
        if s.shape[1] != dim:
            raise DimensionError(f"query has dimension {dim} but a point set has shape {s.shape}")

    sizes = [s.shape[0] for s in sets]
    total = sum(sizes)
    # sum-to-one rows are weighted to the coordinate scale so neither block dominates
    w_sum = max(1.0, max(float(np.max(np.abs(s))) for s in sets), float(np.max(np.abs(q))))
    a = np.zeros((dim + len(sets), total))
    b = np.zeros(dim + len(sets))
    a[:dim] = np.concatenate(sets, axis=0).T
    b[:dim] = q
    col = 0
    for h, n in enumerate(sizes):
        a[dim + h, col:col + n] = w_sum
        b[dim + h] = w_sum
        col += n
    lam, _ = nnls(a, b, maxiter=50 * total)

    weights = []
    col = 0
    ok = True
    for n in sizes:
        block = lam[col:col + n]
        total_w = block.sum()
        if total_w <= 0:
            ok = False
            block = np.full(n, 1.0 / n)
        else:
            block = block / total_w
        weights.append(block)
        col += n
    err = reconstruction_error(q, sets, weights)
    if ok and err <= tol:
        return HullQueryResult(True, weights=weights, slack=err)

    direction, slack = _separating_direction(q, sets)
    if direction is not None and slack > tol:
        return HullQueryResult(False, direction=direction, slack=slack)
    # NNLS can stall short of an exact fit; retry as an LP feasibility problem
    lp_weights = _feasible_weights(q, sets)
    if lp_weights is not None:
        err = reconstruction_error(q, sets, lp_weights)
        if err <= tol:
            return HullQueryResult(True, weights=lp_weights, slack=err)
    return HullQueryResult(False, weights=weights, direction=direction, slack=slack, certified=False)


_LP_OPTIONS = {"primal_feasibility_tolerance": 1e-10, "dual_feasibility_tolerance": 1e-10}


def _feasible_weights(q, sets):
    sizes = [s.shape[0] for s in sets]
    total = sum(sizes)
    a_eq = np.zeros((q.size + len(sets), total))
    a_eq[:q.size] = np.concatenate(sets, axis=0).T
    col = 0
    for h, n in enumerate(sizes):
        a_eq[q.size + h, col:col + n] = 1.0
        col += n
    b_eq = np.concatenate([q, np.ones(len(sets))])
    res = linprog(np.zeros(total), A_eq=a_eq, b_eq=b_eq, bounds=[(0.0, None)] * total, method="highs",
                  options=_LP_OPTIONS)
    if res.status != 0:
        return None
    lam = np.clip(res.x, 0.0, None)
    out, col = [], 0
    for n in sizes:
        block = lam[col:col + n]
        out.append(block / block.sum())
        col += n
    return out


def _separating_direction(q, sets):
    # maximise <w, q> - sum_h s_h  s.t.  <w, P^h_n> <= s_h,  -1 <= w <= 1
    dim, n_sets = q.size, len(sets)
    c = np.concatenate([-q, np.ones(n_sets)])
    rows = []
    for h, s in enumerate(sets):
        block = np.zeros((s.shape[0], dim + n_sets))
        block[:, :dim] = s
        block[:, dim + h] = -1.0
        rows.append(block)
    a_ub = np.vstack(rows)
    bounds = [(-1.0, 1.0)] * dim + [(None, None)] * n_sets
    res = linprog(c, A_ub=a_ub, b_ub=np.zeros(a_ub.shape[0]), bounds=bounds, method="highs", options=_LP_OPTIONS)
    if res.status != 0:
        return None, 0.0
    w = res.x[:dim]
    norm = np.linalg.norm(w)
    if norm == 0.0:
        return None, 0.0
    w = w / norm
    return w, separation_slack(q, sets, w)


def hull_membership(q, s, tol=DEFAULT_TOL):
    """Convex-hull membership of ``q`` in the rows of ``s``."""
    res = minkowski_query(q, [s], tol)
    if res.weights is not None:
        res.weights = res.weights[0]
    return res


def minkowski_membership(q, sets, tol=DEFAULT_TOL):
    return minkowski_query(q, sets, tol).member


def check_certificate(q, sets, result, tol=DEFAULT_TOL):
    """Independently re-verify a certified verdict."""
    q = np.asarray(q, dtype=np.float64).reshape(-1)
    sets = [_points(s) for s in sets]
    if not result.certified:
        return False
    if result.member:
        weights = result.weights if isinstance(result.weights, list) else [result.weights]
        for w in weights:
            if np.min(w) < -1e-9 or abs(w.sum() - 1.0) > 1e-9:
                return False
        return reconstruction_error(q, sets, weights) <= tol
    return separation_slack(q, sets, result.direction) > 0.0


# ---------------------------------------------------------------------------
# attention-specific checks


def head_point_sets(x, p):
    """The projected node sets ``X W^h`` that bound a multi-head output."""
    with no_tape():
        return [(Matrix(x) if not isinstance(x, Matrix) else x).data @ w.data for w in p.vo_weights()]


@dataclass
class BoundedReport:
    trials: int
    passed: int
    max_slack: float
    rows: list = field(default_factory=list)

    @property
    def ok(self):
        return self.passed == self.trials


def random_instance(rng, n, c_in, c_out, heads, std=1.0):
    x = Matrix(rng.normal(size=(n, c_in)))
    p = init_attention_params(c_in, c_out, heads, rng, std=std)
    return x, p


def verify_baseline_bounded(trials, n, c_in, d, heads, rng, tol=DEFAULT_TOL, coefficient=None):
    """Check every multi-head output row lies in the Minkowski sum of per-head hulls.

    With ``coefficient`` given (an H x H array) outputs come from the
    coefficient-mixed layer in direct mode instead of the plain layer.
    Each report row is ``(trial, verdict, slack)`` where ``slack`` is the
    worst reconstruction error among member rows (or the separation
    slack of a failing row).
    """
    passed = 0
    worst = 0.0
    rows = []
    for t in range(trials):
        x, p = random_instance(rng, n, c_in, d, heads)
        with no_tape():
            if coefficient is None:
                out = multi_head_sum(x, p).data
            else:
                c = SubspaceCoefficient(Matrix(coefficient), DIRECT_IDENTITY)
                out = coeff_attention_forward(x, p, c).data
        sets = head_point_sets(x, p)
        verdict, slack = "member", 0.0
        for row in out:
            res = minkowski_query(row, sets, tol)
            if not (res.member and check_certificate(row, sets, res, tol)):
                verdict, slack = res.verdict, res.slack
                break
            slack = max(slack, res.slack)
        if verdict == "member":
            passed += 1
            worst = max(worst, slack)
        rows.append((t, verdict, slack))
    return BoundedReport(trials, passed, worst, rows)


@dataclass
class WitnessResult:
    status: str
    alpha_prime: np.ndarray = None
    row_index: int = None
    output_row: np.ndarray = None
    verdict: HullQueryResult = None
    containment_ok: bool = True
    tried: int = 0


SCALE_CANDIDATES = (1.5, 2.0, 3.0, 5.0)


def coefficient_outputs(x, p, alpha_prime):
    c = SubspaceCoefficient(Matrix(alpha_prime), DIRECT_IDENTITY)
    with no_tape():
        return coeff_attention_forward(x, p, c).data


def first_escaping_row(x, p, alpha_prime, sets, tol=DEFAULT_TOL):
    out = coefficient_outputs(x, p, alpha_prime)
    for i, row in enumerate(out):
        res = minkowski_query(row, sets, tol)
        if res.certified and not res.member and check_certificate(row, sets, res, tol):
            return i, row, res
    return None


def find_expansion_witness(x, p, rng, budget=64, tol=DEFAULT_TOL):
    """Search for alpha' whose output leaves the baseline Minkowski set.

    Scans ``c * I`` for the scales in ``SCALE_CANDIDATES``, then random
    signed perturbations ``I + s * E`` (``E`` entries in {-1, +1}) with
    growing ``s``.  Also checks that ``alpha' = I`` keeps every row
    inside.  Returns status ``"found"`` or ``"inconclusive"``.
    """
    heads = p.heads
    sets = head_point_sets(x, p)
    eye = np.eye(heads)
    containment_ok = True
    for row in coefficient_outputs(x, p, eye):
        res = minkowski_query(row, sets, tol)
        if not (res.member and check_certificate(row, sets, res, tol)):
            containment_ok = False
            break

    candidates = [c * eye for c in SCALE_CANDIDATES]
    tried = 0
    for k in range(budget):
        if k < len(candidates):
            a = candidates[k]
        else:
            s = 2.0 ** (1 + (k - len(candidates)) // 8)
            a = eye + s * rng.choice([-1.0, 1.0], size=(heads, heads))
        tried += 1
        hit = first_escaping_row(x, p, a, sets, tol)
        if hit is not None:
            i, row, res = hit
            return WitnessResult("found", a, i, row, res, containment_ok, tried)
    return WitnessResult("inconclusive", containment_ok=containment_ok, tried=tried)
