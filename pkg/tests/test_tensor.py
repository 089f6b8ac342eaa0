import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lionlora import tensor as T
from lionlora.errors import (
    ContractError,
    DimensionError,
    DomainError,
    DTypeError,
    PropagationError,
    UndefinedSimilarityError,
)
from lionlora.tensor import Tape, Tensor, backward, grad_check


def triple_loop(a, b):
    m, p = a.shape
    q = b.shape[1]
    out = np.zeros((m, q))
    for i in range(m):
        for j in range(q):
            s = 0.0
            for k in range(p):
                s += a[i, k] * b[k, j]
            out[i, j] = s
    return out


# -- matmul -------------------------------------------------------------------


def test_matmul_identity():
    m = Tensor([[1.5, -2.0], [0.25, 3.0]])
    assert np.array_equal((Tensor(np.eye(2)) @ m).data, m.data)


def test_matmul_projector():
    out = Tensor([[1.0, 0.0], [0.0, 0.0]]) @ Tensor([[2.0, 3.0], [4.0, 5.0]])
    assert out.data.tolist() == [[2.0, 3.0], [0.0, 0.0]]


def test_matmul_against_triple_loop():
    rng = np.random.default_rng(3)
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    got = (Tensor(a) @ Tensor(b)).data
    np.testing.assert_allclose(got, triple_loop(a, b), rtol=0, atol=1e-12)


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        Tensor(np.ones((2, 3))) @ Tensor(np.ones((2, 3)))


def test_matmul_dtype_mismatch():
    with pytest.raises(DTypeError):
        Tensor(np.ones((2, 2)), dtype="f32") @ Tensor(np.ones((2, 2)), dtype="f64")


def test_no_general_broadcasting():
    with pytest.raises(DimensionError):
        Tensor(np.ones((2, 3))) + Tensor(np.ones((3, 1)))
    with pytest.raises(DimensionError):
        Tensor(np.ones((2, 3))) * Tensor(np.ones(3))


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 4), st.integers(1, 4),
       st.integers(0, 10_000))
def test_matmul_associative(m, p, q, r, seed):
    rng = np.random.default_rng(seed)
    a, b, c = (Tensor(rng.normal(size=s)) for s in [(m, p), (p, q), (q, r)])
    left = ((a @ b) @ c).data
    right = (a @ (b @ c)).data
    np.testing.assert_allclose(left, right, rtol=0, atol=1e-10)


# -- norms and similarity ----------------------------------------------------


def test_frobenius_norm_values():
    assert T.frobenius_norm(Tensor(np.eye(2))).item() == pytest.approx(math.sqrt(2), abs=1e-15)
    assert T.frobenius_norm(Tensor(np.zeros((3, 2)))).item() == 0.0
    m = np.array([[1.0, 2.0], [3.0, 4.0]])
    oracle = math.sqrt(sum(v * v for v in m.ravel()))
    assert T.frobenius_norm(Tensor(m)).item() == pytest.approx(oracle, abs=1e-12)
    assert oracle == pytest.approx(5.4772, abs=1e-4)


def test_frobenius_norm_empty():
    with pytest.raises(DomainError):
        T.frobenius_norm(Tensor(np.zeros((0, 3))))


def test_cosine_similarity_values():
    assert T.cosine_similarity([1, 0], [0, 1]) == 0.0
    assert T.cosine_similarity([0.3, -2.0, 1.0], [0.3, -2.0, 1.0]) == pytest.approx(1.0, abs=1e-15)
    assert T.cosine_similarity([1, 1], [1, 0]) == pytest.approx(1 / math.sqrt(2), abs=1e-12)


def test_cosine_similarity_zero_vector():
    with pytest.raises(UndefinedSimilarityError):
        T.cosine_similarity([0, 0], [1, 0])


# -- softmax ------------------------------------------------------------------


def test_softmax_uniform_and_saturated():
    y = T.softmax_rows(Tensor(np.full((1, 5), 3.7))).data
    np.testing.assert_allclose(y, np.full((1, 5), 0.2), atol=1e-15)
    y = T.softmax_rows(Tensor([[0.0, 800.0]])).data
    assert y[0, 1] == pytest.approx(1.0) and y[0, 0] < 1e-300


def test_softmax_against_direct_formula():
    row = np.random.default_rng(1).normal(size=(1, 7))
    oracle = np.exp(row) / np.exp(row).sum()
    np.testing.assert_allclose(T.softmax_rows(Tensor(row)).data, oracle, rtol=0, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 5), st.integers(1, 9), st.floats(0.1, 50), st.integers(0, 10_000))
def test_softmax_rows_sum_to_one(m, n, spread, seed):
    x = np.random.default_rng(seed).normal(scale=spread, size=(m, n))
    y = T.softmax_rows(Tensor(x)).data
    assert (y >= 0).all()
    np.testing.assert_allclose(y.sum(axis=1), 1.0, rtol=0, atol=1e-12)


def test_softmax_nan():
    with pytest.raises(PropagationError):
        T.softmax_rows(Tensor([[0.0, float("nan")]]))


# -- backward -----------------------------------------------------------------


def test_backward_square():
    x = Tensor(3.0, requires_grad=True)
    with Tape() as tape:
        y = T.square(x)
    g = backward(tape, y)
    assert g[x] == 6.0
    assert x.grad == 6.0


def test_backward_sum_of_product():
    rng = np.random.default_rng(0)
    a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    b = Tensor(rng.normal(size=(4, 2)))
    with Tape() as tape:
        loss = (a @ b).sum()
    g = backward(tape, loss)
    np.testing.assert_allclose(g[a], np.ones((3, 2)) @ b.data.T, atol=1e-14)
    assert b not in g


def test_backward_requires_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        y = x * 2.0
    with pytest.raises(ContractError):
        backward(tape, y)


def test_backward_foreign_loss():
    x = Tensor(2.0, requires_grad=True)
    with Tape():
        y = T.square(x)
    with pytest.raises(ContractError):
        backward(Tape(), y)


def test_backward_deterministic():
    rng = np.random.default_rng(5)
    w1 = Tensor(rng.normal(size=(4, 6)), requires_grad=True)
    w2 = Tensor(rng.normal(size=(6, 1)), requires_grad=True)
    x = Tensor(rng.normal(size=(8, 4)))

    def run():
        with Tape() as tape:
            loss = T.square(T.gelu(x @ w1) @ w2).mean()
        g = backward(tape, loss)
        return g[w1].copy(), g[w2].copy()

    a, b = run(), run()
    assert all(np.array_equal(u, v) for u, v in zip(a, b))


def test_no_recording_without_tape():
    x = Tensor(np.ones(2), requires_grad=True)
    y = x * 3.0
    assert not y.requires_grad


def test_mlp_gradient_matches_finite_differences():
    rng = np.random.default_rng(11)
    x = Tensor(rng.normal(size=(5, 3)))
    w1 = Tensor(rng.normal(size=(3, 4)))
    b1 = Tensor(rng.normal(size=4))
    w2 = Tensor(rng.normal(size=(4, 2)))

    def loss(_):
        return T.square(T.tanh(x @ w1 + b1) @ w2).sum()

    for p in (w1, b1, w2):
        assert grad_check(loss, p) < 1e-6


# -- grad_check --------------------------------------------------------------


def test_grad_check_square():
    x = Tensor(3.0)
    assert grad_check(lambda v: T.square(v), x, 1e-5) < 1e-8


def test_grad_check_frobenius_squared():
    x = Tensor(np.random.default_rng(2).normal(size=(3, 3)))
    assert grad_check(lambda v: T.square(T.frobenius_norm(v)), x) < 1e-6


def test_grad_check_rejects_f32():
    with pytest.raises(DTypeError):
        grad_check(lambda v: v.sum(), Tensor(np.ones(2), dtype="f32"))


def test_grad_check_restores_input():
    x = Tensor(np.random.default_rng(0).normal(size=4))
    before = x.data.copy()
    grad_check(lambda v: T.square(v).sum(), x)
    assert np.array_equal(x.data, before)
    assert not x.requires_grad


# -- dtype ---------------------------------------------------------------------


def test_explicit_conversion():
    t = Tensor(np.ones(3), dtype="f32")
    assert t.dtype == "f32"
    assert t.to("f64").dtype == "f64"
    with pytest.raises(DTypeError):
        t + Tensor(np.ones(3))


# -- every differentiable primitive ------------------------------------------

from gradcases import primitive_cases  # noqa: E402

_CASES = primitive_cases()


@pytest.mark.parametrize("name", sorted(_CASES))
def test_primitive_gradient(name):
    f, x = _CASES[name]
    assert grad_check(f, x) < 1e-5


def test_stack_mean_single_is_identity():
    x = Tensor(np.ones((2, 2)))
    assert T.stack_mean([x]) is x
