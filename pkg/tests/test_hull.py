import itertools

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.spatial import ConvexHull, Delaunay

from coefflab.attention import AttentionParams, init_attention_params
from coefflab.errors import DimensionError
from coefflab.hull import (
    check_certificate,
    coefficient_outputs,
    find_expansion_witness,
    first_escaping_row,
    head_point_sets,
    hull_membership,
    minkowski_membership,
    minkowski_query,
    random_instance,
    verify_baseline_bounded,
)
from coefflab.tensor import Matrix

SQUARE = np.array([[1, 1], [1, -1], [-1, -1], [-1, 1]], dtype=float)


def test_centroid_member():
    res = hull_membership([0, 0], SQUARE)
    assert res.member and res.verdict == "member"
    assert np.allclose(res.weights @ SQUARE, 0, atol=1e-9)
    assert check_certificate([0, 0], [SQUARE], res)


def test_vertex_member():
    assert hull_membership(SQUARE[2], SQUARE).member


def test_outside_with_direction():
    res = hull_membership([2, 0], SQUARE)
    assert not res.member and res.verdict == "non-member"
    assert np.allclose(res.direction, [1, 0], atol=1e-6)
    assert res.slack > 0 and check_certificate([2, 0], [SQUARE], res)


def test_single_point_set():
    p = np.array([[0.3, -0.2]])
    assert hull_membership([0.3, -0.2], p).member
    assert not hull_membership([0.3, -0.19], p).member


def test_dimension_mismatch():
    with pytest.raises(DimensionError):
        hull_membership([0, 0, 0], SQUARE)
    with pytest.raises(DimensionError):
        minkowski_query([0, 0], [])


def test_sum_of_squares():
    assert minkowski_membership([1.5, 0], [SQUARE, SQUARE])
    assert not minkowski_membership([2.5, 0], [SQUARE, SQUARE])


def test_h1_matches_hull_membership(rng):
    pts = rng.normal(size=(6, 2))
    for q in rng.normal(scale=1.5, size=(100, 2)):
        assert minkowski_membership(q, [pts]) == hull_membership(q, pts).member


def _vertex_sum_hull(sets):
    sums = np.array([np.sum(c, axis=0) for c in itertools.product(*sets)])
    return Delaunay(sums[ConvexHull(sums).vertices])


def test_h3_against_vertex_sum_grid_oracle(rng):
    # independent oracle: the Minkowski sum of hulls is the hull of all vertex sums
    sets = [rng.normal(size=(4, 2)) for _ in range(3)]
    tri = _vertex_sum_hull(sets)
    lo, hi = np.min(tri.points, axis=0) - 0.5, np.max(tri.points, axis=0) + 0.5
    grid = np.stack(np.meshgrid(np.linspace(lo[0], hi[0], 25), np.linspace(lo[1], hi[1], 25)), -1).reshape(-1, 2)
    inside = tri.find_simplex(grid) >= 0
    # skip points within a hair of the boundary where the two tests may legitimately differ
    margin = np.min(np.abs(ConvexHull(tri.points).equations[:, :2] @ grid.T + ConvexHull(tri.points).equations[:, 2:]),
                    axis=0)
    checked = 0
    for q, expect, m in zip(grid, inside, margin):
        if m < 1e-6:
            continue
        res = minkowski_query(q, sets)
        assert res.member == expect
        assert check_certificate(q, sets, res)
        checked += 1
    assert checked > 500


@given(st.integers(1, 3), st.integers(1, 5), st.integers(0, 2**32 - 1))
def test_certificates_always_check(heads, n, seed):
    r = np.random.default_rng(seed)
    sets = [r.normal(size=(n, 2)) for _ in range(heads)]
    q = r.normal(scale=2.0, size=2)
    res = minkowski_query(q, sets)
    if res.certified:
        assert check_certificate(q, sets, res)
        if res.member:
            for w in res.weights:
                assert w.min() >= -1e-9 and abs(w.sum() - 1) <= 1e-9


def test_bounded_small_run(rng):
    rep = verify_baseline_bounded(50, 8, 2, 2, 2, rng)
    assert rep.ok and rep.max_slack < 1e-8
    assert [r[1] for r in rep.rows] == ["member"] * 50


def test_bounded_single_head(rng):
    rep = verify_baseline_bounded(20, 6, 3, 2, 1, rng)
    assert rep.ok


def test_zero_weights_collapse_to_origin(rng):
    x = Matrix(rng.normal(size=(5, 2)))
    z = np.zeros((2, 1))
    p = AttentionParams([rng.normal(size=(2, 1))] * 2, [rng.normal(size=(2, 1))] * 2, [z, z], np.zeros((2, 2)))
    sets = head_point_sets(x, p)
    for row in coefficient_outputs(x, p, np.eye(2)):
        assert np.array_equal(row, np.zeros(2))
        assert minkowski_membership(row, sets)


def test_containment_at_identity(rng):
    rep = verify_baseline_bounded(30, 8, 2, 2, 2, rng, coefficient=np.eye(2))
    assert rep.ok


def test_three_identity_escapes(rng):
    hits = 0
    for _ in range(10):
        x, p = random_instance(rng, 8, 2, 2, 2)
        hit = first_escaping_row(x, p, 3 * np.eye(2), head_point_sets(x, p))
        if hit is not None:
            i, row, res = hit
            assert check_certificate(row, head_point_sets(x, p), res)
            hits += 1
    assert hits >= 9


def test_negative_entry_escapes(rng):
    x, p = random_instance(rng, 8, 2, 2, 2)
    sets = head_point_sets(x, p)
    hit = first_escaping_row(x, p, np.array([[1.0, -2.0], [0.0, 1.0]]), sets)
    assert hit is not None
    assert hit[2].slack > 0 and check_certificate(hit[1], sets, hit[2])


def test_witness_search(rng):
    found = 0
    for _ in range(20):
        x, p = random_instance(rng, 8, 2, 2, 2)
        w = find_expansion_witness(x, p, rng)
        assert w.containment_ok
        if w.status == "found":
            found += 1
            assert check_certificate(w.output_row, head_point_sets(x, p), w.verdict)
    assert found >= 19


def test_witness_search_inconclusive_when_degenerate(rng):
    # all-zero value path: every output is the origin, nothing can escape
    x = Matrix(rng.normal(size=(5, 2)))
    p = init_attention_params(2, 2, 2, rng, std=1.0)
    z = np.zeros((2, 1))
    p = AttentionParams(p.wq, p.wk, [z, z], p.wo)
    w = find_expansion_witness(x, p, rng, budget=8)
    assert w.status == "inconclusive" and w.tried == 8
