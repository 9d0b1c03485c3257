import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from coefflab.errors import DimensionError, NumericError, UsageError
from coefflab.tensor import (
    Matrix,
    Tape,
    add,
    backward,
    finite_difference_grad,
    hadamard,
    matmul,
    mix,
    mse_loss,
    no_tape,
    relative_error,
    scale,
    softmax_rows,
    sum_all,
    transpose,
)

finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)


def triple_loop(a, b):
    n, k = a.shape
    m = b.shape[1]
    out = [[0.0] * m for _ in range(n)]
    for i in range(n):
        for j in range(m):
            s = 0.0
            for t in range(k):
                s += a[i][t] * b[t][j]
            out[i][j] = s
    return np.array(out)


def scalar_mse(p, t):
    tot, cnt = 0.0, 0
    for row_p, row_t in zip(p.tolist(), t.tolist()):
        for x, y in zip(row_p, row_t):
            tot += (x - y) ** 2
            cnt += 1
    return tot / cnt


# --- matmul ---------------------------------------------------------------


def test_matmul_identity():
    m = [[3, 4], [5, 6]]
    assert np.array_equal(matmul(Matrix(np.eye(2)), Matrix(m)).data, np.array(m, float))


def test_matmul_forced_arithmetic():
    assert matmul(Matrix([[1, 2]]), Matrix([[3], [4]])).data.tolist() == [[11.0]]


def test_matmul_random_against_triple_loop(rng):
    a, b = rng.normal(size=(5, 7)), rng.normal(size=(7, 3))
    assert np.max(np.abs(matmul(Matrix(a), Matrix(b)).data - triple_loop(a, b))) < 1e-12


@given(st.integers(1, 32), st.integers(1, 32), st.integers(1, 32), st.integers(0, 2**32 - 1))
def test_matmul_property_up_to_32(n, k, m, seed):
    r = np.random.default_rng(seed)
    a, b = r.normal(size=(n, k)), r.normal(size=(k, m))
    assert np.max(np.abs(matmul(Matrix(a), Matrix(b)).data - triple_loop(a, b))) < 1e-12


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        matmul(Matrix(np.ones((2, 3))), Matrix(np.ones((2, 3))))


def test_matmul_batched_matches_loop(rng):
    a, b = rng.normal(size=(4, 3, 5)), rng.normal(size=(5, 2))
    out = matmul(Matrix(a), Matrix(b)).data
    for i in range(4):
        assert np.allclose(out[i], a[i] @ b, atol=1e-13)
    with pytest.raises(DimensionError):
        matmul(Matrix(a), Matrix(rng.normal(size=(3, 5, 2))))


# --- softmax --------------------------------------------------------------


def test_softmax_examples():
    assert np.allclose(softmax_rows(Matrix([[0, 0]])).data, [[0.5, 0.5]], atol=1e-15)
    assert np.allclose(softmax_rows(Matrix([[math.log(2), 0]])).data, [[2 / 3, 1 / 3]], atol=1e-15)
    big = softmax_rows(Matrix([[1000, 0]])).data
    assert np.all(np.isfinite(big))
    assert big[0, 0] == pytest.approx(1.0) and big[0, 1] == pytest.approx(0.0, abs=1e-300)


@given(arrays(np.float64, st.tuples(st.integers(1, 8), st.integers(1, 8)), elements=finite))
def test_softmax_row_stochastic(x):
    y = softmax_rows(Matrix(x)).data
    assert np.max(np.abs(y.sum(axis=1) - 1.0)) < 1e-12
    assert np.all(y > 0.0)
    if x.shape[1] > 1:
        assert np.all(y < 1.0)


# --- elementwise ops ------------------------------------------------------


def test_elementwise_identities(rng):
    a = Matrix(rng.normal(size=(3, 4)))
    assert np.array_equal(add(a, Matrix.zeros(3, 4)).data, a.data)
    assert np.array_equal(scale(a, 0.0).data, np.zeros((3, 4)))
    assert np.array_equal(transpose(transpose(a)).data, a.data)
    assert np.array_equal(hadamard(a, Matrix(np.ones((3, 4)))).data, a.data)


@pytest.mark.parametrize("op", [add, hadamard])
def test_elementwise_shape_mismatch(op):
    with pytest.raises(DimensionError):
        op(Matrix(np.ones((2, 3))), Matrix(np.ones((3, 2))))


def test_operators(rng):
    a, b = Matrix(rng.normal(size=(2, 2))), Matrix(rng.normal(size=(2, 2)))
    assert np.allclose((a + b).data, a.data + b.data)
    assert np.allclose((a - b).data, a.data - b.data)
    assert np.allclose((-a).data, -a.data)
    assert np.allclose((a * 2).data, 2 * a.data)
    assert np.allclose((a * b).data, a.data * b.data)
    assert np.allclose((a @ b).data, a.data @ b.data)
    assert np.allclose(a.T.data, a.data.T)


def test_matrix_is_immutable(rng):
    m = Matrix(rng.normal(size=(2, 2)))
    with pytest.raises(ValueError):
        m.data[0, 0] = 1.0


def test_matrix_rejects_wrong_rank():
    with pytest.raises(DimensionError):
        Matrix([1.0, 2.0])


@pytest.mark.filterwarnings("ignore:overflow:RuntimeWarning")
def test_non_finite_result_raises():
    with pytest.raises(NumericError):
        scale(Matrix([[1e308]]), 1e10)
    with pytest.raises(NumericError):
        Matrix([[np.nan]]) @ Matrix([[1.0]])


# --- mse ------------------------------------------------------------------


def test_mse_examples(rng):
    t = rng.normal(size=(3, 4))
    assert mse_loss(Matrix(t), Matrix(t)).item() == 0.0
    assert mse_loss(Matrix(t + 1), Matrix(t)).item() == pytest.approx(1.0, abs=1e-15)
    p = rng.normal(size=(3, 4))
    assert abs(mse_loss(Matrix(p), Matrix(t)).item() - scalar_mse(p, t)) < 1e-12
    with pytest.raises(DimensionError):
        mse_loss(Matrix(p), Matrix(t.T))


# --- backward -------------------------------------------------------------


def test_backward_sum_gives_ones():
    w = Matrix(np.arange(4.0).reshape(2, 2), requires_grad=True)
    with Tape() as tape:
        loss = sum_all(w)
    assert np.array_equal(tape.backward(loss)[w].data, np.ones((2, 2)))


def test_backward_mse_closed_form(rng):
    x, t = Matrix(rng.normal(size=(5, 3))), Matrix(rng.normal(size=(5, 2)))
    w = Matrix(rng.normal(size=(3, 2)), requires_grad=True)
    with Tape():
        loss = mse_loss(matmul(x, w), t)
        g = backward(loss)[w].data
    expected = 2 * x.data.T @ (x.data @ w.data - t.data) / t.data.size
    assert np.allclose(g, expected, atol=1e-14)


def test_backward_without_tape_is_usage_error():
    with pytest.raises(UsageError):
        backward(Matrix([[1.0]]))


def test_backward_needs_scalar_loss(rng):
    w = Matrix(rng.normal(size=(2, 2)), requires_grad=True)
    with Tape() as tape:
        y = scale(w, 2.0)
    with pytest.raises(UsageError):
        tape.backward(y)


def test_unreachable_param_gets_zero_gradient(rng):
    w = Matrix(rng.normal(size=(2, 2)), requires_grad=True)
    u = Matrix(rng.normal(size=(3, 1)), requires_grad=True)
    with Tape() as tape:
        loss = sum_all(w)
    g = tape.backward(loss, [w, u])
    assert g[u].shape == u.shape and not g[u].data.any()


def test_tape_topological_order(rng):
    w = Matrix(rng.normal(size=(2, 2)), requires_grad=True)
    with Tape() as tape:
        sum_all(softmax_rows(matmul(w, w)))
    seen = {id(w)}
    for rec in tape.records:
        assert all(id(i) in seen or not (i.requires_grad or id(i) in tape._tracked) for i in rec.inputs)
        seen.add(id(rec.output))


def test_no_tape_suspends_recording(rng):
    w = Matrix(rng.normal(size=(2, 2)), requires_grad=True)
    with Tape() as tape:
        with no_tape():
            matmul(w, w)
        assert len(tape) == 0


def test_batched_gradient_sums_over_batch(rng):
    x = Matrix(rng.normal(size=(3, 4, 2)))
    w = Matrix(rng.normal(size=(2, 2)), requires_grad=True)
    t = Matrix(rng.normal(size=(3, 4, 2)))
    with Tape() as tape:
        loss = mse_loss(softmax_rows(matmul(x, w)), t)
    g = tape.backward(loss)[w]
    fd = finite_difference_grad(lambda m: mse_loss(softmax_rows(matmul(x, m)), t), w)
    assert relative_error(g, fd) < 1e-6


def _composite(x, params, target):
    a, b, c = params
    h = softmax_rows(matmul(matmul(x, a), transpose(matmul(x, b))))
    out = add(hadamard(matmul(h, matmul(x, c)), matmul(x, c)), scale(matmul(x, c), 0.3))
    return mse_loss(out, target)


@given(st.integers(1, 5), st.integers(1, 4), st.integers(0, 2**32 - 1))
def test_backward_matches_finite_differences(n, c, seed):
    r = np.random.default_rng(seed)
    # kept O(1): central differences lose ~|loss| * 1e-16 / eps to round-off
    x = Matrix(r.normal(0, 0.5, size=(n, c)))
    t = Matrix(r.normal(size=(n, c)))
    params = [Matrix(r.normal(0, 0.5, (c, c)), requires_grad=True) for _ in range(3)]
    with Tape() as tape:
        loss = _composite(x, params, t)
    grads = tape.backward(loss)
    # central differences at eps=1e-5 carry ~1e-11 * |loss| of round-off;
    # tiny entries get that much absolute slack on top of 1e-5 relative
    noise = 1e-10 * max(1.0, abs(loss.item()))
    for k, p in enumerate(params):
        def f(m, k=k):
            ps = list(params)
            ps[k] = m
            return _composite(x, ps, t)

        g, fd = grads[p].data, finite_difference_grad(f, p).data
        assert np.all(np.abs(g - fd) <= 1e-5 * np.abs(fd) + noise)


def test_mix_gradient(rng):
    coeff = Matrix(rng.normal(size=(3, 3)), requires_grad=True)
    mats = [Matrix(rng.normal(size=(2, 4)), requires_grad=True) for _ in range(3)]
    t = Matrix(rng.normal(size=(2, 4)))

    def loss_of(c, ms):
        out = mix(c, ms)
        return mse_loss(add(hadamard(out[0], out[1]), out[2]), t)

    with Tape() as tape:
        loss = loss_of(coeff, mats)
    grads = tape.backward(loss)
    assert relative_error(grads[coeff], finite_difference_grad(lambda m: loss_of(m, mats), coeff)) < 1e-6
    for k, m in enumerate(mats):
        def f(v, k=k):
            ms = list(mats)
            ms[k] = v
            return loss_of(coeff, ms)

        assert relative_error(grads[m], finite_difference_grad(f, m)) < 1e-6


def test_mix_identity_is_exact(rng):
    mats = [Matrix(rng.normal(size=(3, 3))) for _ in range(4)]
    out = mix(Matrix(np.eye(4)), mats)
    for a, b in zip(out, mats):
        assert np.array_equal(a.data, b.data)


# --- finite differences ---------------------------------------------------


def test_fd_sum_of_squares():
    g = finite_difference_grad(lambda m: float(np.sum(m.data ** 2)), Matrix(np.eye(2)))
    assert np.allclose(g.data, 2 * np.eye(2), atol=1e-9)


def test_fd_linear_is_exact(rng):
    c = rng.normal(size=(3, 2))
    g = finite_difference_grad(lambda m: float(np.sum(c * m.data)), Matrix(rng.normal(size=(3, 2))))
    assert np.max(np.abs(g.data - c)) < 1e-9


def test_fd_five_point_exact_on_quartic(rng):
    # the five-point stencil has no truncation error up to degree 4
    x0 = rng.normal(size=(2, 3))
    g = finite_difference_grad(lambda m: float(np.sum(m.data ** 4 - 3 * m.data ** 3)), Matrix(x0),
                               eps=1e-2, order=4)
    assert np.allclose(g.data, 4 * x0 ** 3 - 9 * x0 ** 2, rtol=1e-10, atol=1e-10)
    with pytest.raises(ValueError):
        finite_difference_grad(lambda m: 0.0, Matrix(x0), order=3)


def test_fd_five_point_beats_three_point_on_tiny_entries(rng):
    # f = L + tiny * x: the tiny slope drowns in round-off at eps=1e-5
    def f(m):
        return float(2.0 + 1e-8 * m.data[0, 0] + np.sum(np.sin(m.data)) * 1e-3)

    x0 = Matrix([[0.3]])
    exact = 1e-8 + 1e-3 * np.cos(0.3)
    e2 = abs(finite_difference_grad(f, x0).item() - exact)
    e4 = abs(finite_difference_grad(f, x0, eps=2e-3, order=4).item() - exact)
    assert e4 < 1e-12 and e4 < e2


def test_fd_non_finite_raises():
    with pytest.raises(NumericError):
        finite_difference_grad(lambda m: float("nan"), Matrix([[1.0]]))


def test_relative_error_floor():
    assert relative_error(Matrix([[1e-10]]), Matrix([[0.0]])) == pytest.approx(1e-10)
    assert relative_error(Matrix([[2.0]]), Matrix([[1.0]])) == pytest.approx(0.5)


def test_determinism(rng):
    x = rng.normal(size=(6, 6))
    a = softmax_rows(matmul(Matrix(x), Matrix(x))).data
    b = softmax_rows(matmul(Matrix(x), Matrix(x))).data
    assert np.array_equal(a, b)
