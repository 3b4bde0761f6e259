"""Numerics substrate: forward ops, exact backwards, MAC accounting."""

import math
from concurrent.futures import ThreadPoolExecutor
from contextvars import copy_context

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from patchcert import numerics as nx
from patchcert.errors import DimensionError, ParameterError, UsageError


@pytest.fixture
def rng():
    return np.random.default_rng(0)


# ---------------------------------------------------------------------------
# matmul and MAC counting


def test_matmul_identity():
    eye = np.eye(2, dtype=np.float32)
    b = np.array([[5, 6], [7, 8]], dtype=np.float32)
    assert np.array_equal(nx.matmul(eye, b), b)


def test_matmul_small_case():
    a = np.array([[1.0, 2.0]], dtype=np.float32)
    b = np.array([[3.0], [4.0]], dtype=np.float32)
    assert nx.matmul(a, b)[0, 0] == pytest.approx(11.0)


def test_matmul_matches_triple_loop_reference():
    rng = np.random.default_rng(7)
    a = rng.normal(size=(3, 4)).astype(np.float32)
    b = rng.normal(size=(4, 2)).astype(np.float32)
    ref = nx.matmul_reference(a, b)
    np.testing.assert_allclose(nx.matmul(a, b), ref, rtol=1e-5, atol=1e-6)


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 2\)"):
        nx.matmul(np.zeros((2, 3), np.float32), np.zeros((2, 2), np.float32))


def test_mac_counter_counts_mkn_exactly():
    a = np.zeros((3, 4), np.float32)
    b = np.zeros((4, 5), np.float32)
    with nx.count_macs() as c:
        nx.matmul(a, b)
        assert c.total == 3 * 4 * 5
        nx.matmul(a, b)
    assert c.total == 2 * 3 * 4 * 5
    # no counter active outside the context
    nx.matmul(a, b)
    assert c.total == 2 * 3 * 4 * 5


def test_mac_counter_safe_across_threads():
    a = np.zeros((2, 8), np.float32)
    b = np.zeros((8, 2), np.float32)

    def work():
        nx.matmul(a, b)
        return 2 * 8 * 2

    with nx.count_macs() as c:
        with ThreadPoolExecutor(max_workers=4) as pool:
            ctxs = [copy_context() for _ in range(40)]
            futs = [pool.submit(ctx.run, work) for ctx in ctxs]
            expected = sum(f.result() for f in futs)
    assert c.total == expected


# ---------------------------------------------------------------------------
# softmax


def test_softmax_symmetry():
    out = nx.softmax_last_dim(np.zeros(3, np.float32))
    np.testing.assert_allclose(out, np.full(3, 1 / 3), atol=1e-7)


def test_softmax_stable_under_large_inputs():
    out = nx.softmax_last_dim(np.array([1000.0, 0.0], np.float32))
    np.testing.assert_allclose(out, [1.0, 0.0], atol=1e-6)
    assert np.isfinite(out).all()


def test_softmax_matches_direct_formula():
    x = np.array([1.0, 2.0, 3.0], np.float32)
    e = np.exp(np.array([1.0, 2.0, 3.0], np.float64))
    np.testing.assert_allclose(nx.softmax_last_dim(x), e / e.sum(), atol=1e-6)


@settings(deadline=None, max_examples=60)
@given(
    st.lists(
        st.floats(min_value=-100, max_value=100, allow_nan=False, width=32),
        min_size=1,
        max_size=12,
    )
)
def test_softmax_rows_sum_to_one(values):
    out = nx.softmax_last_dim(np.array(values, np.float32))
    assert np.isfinite(out).all()
    assert out.min() >= 0.0
    assert abs(out.sum() - 1.0) < 1e-6


def test_softmax_rejects_empty_last_dim():
    with pytest.raises(ParameterError):
        nx.softmax_last_dim(np.zeros((2, 0), np.float32))


# ---------------------------------------------------------------------------
# layer norm


def test_layer_norm_constant_slice():
    x = np.full(4, 5.0, np.float32)
    out = nx.layer_norm(x, np.ones(4, np.float32), np.zeros(4, np.float32))
    np.testing.assert_allclose(out, np.zeros(4), atol=1e-6)


def test_layer_norm_two_point_standardization():
    x = np.array([1.0, 3.0], np.float32)
    out = nx.layer_norm(x, np.ones(2, np.float32), np.zeros(2, np.float32), eps=1e-6)
    np.testing.assert_allclose(out, [-1.0, 1.0], atol=1e-3)


def test_layer_norm_matches_float64_reference():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(5, 8)).astype(np.float32)
    gamma = rng.normal(size=8).astype(np.float32)
    beta = rng.normal(size=8).astype(np.float32)
    x64 = x.astype(np.float64)
    mu = x64.mean(-1, keepdims=True)
    var = ((x64 - mu) ** 2).mean(-1, keepdims=True)
    ref = (x64 - mu) / np.sqrt(var + 1e-5) * gamma + beta
    np.testing.assert_allclose(nx.layer_norm(x, gamma, beta), ref, atol=1e-5)


def test_layer_norm_normalizes_pre_affine():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(3, 16)).astype(np.float32)
    out = nx.layer_norm(x, np.ones(16, np.float32), np.zeros(16, np.float32))
    np.testing.assert_allclose(out.mean(-1), 0.0, atol=1e-5)
    np.testing.assert_allclose(out.var(-1), 1.0, atol=1e-3)


def test_layer_norm_rejects_bad_eps():
    with pytest.raises(ParameterError):
        nx.layer_norm_fwd(np.ones(3, np.float32), np.ones(3), np.zeros(3), eps=0.0)


# ---------------------------------------------------------------------------
# gelu


def test_gelu_zero():
    assert nx.gelu(np.float32(0.0)) == 0.0


def test_gelu_asymptote():
    assert abs(float(nx.gelu(np.float32(10.0))) - 10.0) < 1e-4


def test_gelu_at_one_matches_formula():
    expected = 0.5 * 1.0 * (1.0 + math.tanh(math.sqrt(2.0 / math.pi) * (1.0 + 0.044715)))
    assert float(nx.gelu(np.float32(1.0))) == pytest.approx(expected, abs=1e-6)


def test_gelu_finite_on_extremes():
    x = np.array([-50.0, -1.0, 0.0, 1.0, 50.0], np.float32)
    assert np.isfinite(nx.gelu(x)).all()


# ---------------------------------------------------------------------------
# backward passes vs finite differences


def _rel_err(a, b, floor=1e-8):
    denom = max(np.abs(a).max(), np.abs(b).max(), floor)
    return np.abs(a - b).max() / denom


def test_identity_matmul_chain_passes_gradient_through():
    rng = np.random.default_rng(1)
    dy = rng.normal(size=(3, 3)).astype(np.float32)
    eye = np.eye(3, dtype=np.float32)
    # y = (x @ I) @ I  =>  dx = (dy @ I^T) @ I^T = dy
    dx = nx.matmul(nx.matmul(dy, eye.T), eye.T)
    np.testing.assert_array_equal(dx, dy)


def test_cross_entropy_gradient_closed_form():
    logits = np.array([2.0, 1.0, 0.5], np.float32)
    target = int(np.argmax(logits))
    grad = nx.cross_entropy_backward(logits, target)
    expected = nx.softmax_last_dim(logits).copy()
    expected[target] -= 1.0
    np.testing.assert_allclose(grad, expected, atol=1e-7)


def test_cross_entropy_matches_finite_differences():
    rng = np.random.default_rng(2)
    logits = rng.normal(size=6).astype(np.float32)
    fd = nx.finite_difference_gradient(lambda t: nx.cross_entropy(t, 3), logits, h=1e-4)
    assert _rel_err(nx.cross_entropy_backward(logits, 3).astype(np.float64), fd) < 1e-3


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_layer_norm_backward_matches_fd(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(2, 6)).astype(np.float32)
    gamma = rng.normal(size=6).astype(np.float32)
    beta = rng.normal(size=6).astype(np.float32)
    dy = rng.normal(size=(2, 6)).astype(np.float32)
    _, ctx = nx.layer_norm_fwd(x, gamma, beta)
    dx, dgamma, dbeta = nx.layer_norm_bwd(ctx, dy)

    def loss_x(t):
        return float((nx.layer_norm_fwd(t, gamma.astype(t.dtype), beta.astype(t.dtype))[0] * dy).sum())

    def loss_g(t):
        return float((nx.layer_norm_fwd(x.astype(np.float64), t, beta.astype(np.float64))[0] * dy).sum())

    def loss_b(t):
        return float((nx.layer_norm_fwd(x.astype(np.float64), gamma.astype(np.float64), t)[0] * dy).sum())

    assert _rel_err(dx.astype(np.float64), nx.finite_difference_gradient(loss_x, x)) < 1e-3
    assert _rel_err(dgamma.astype(np.float64), nx.finite_difference_gradient(loss_g, gamma)) < 1e-3
    assert _rel_err(dbeta.astype(np.float64), nx.finite_difference_gradient(loss_b, beta)) < 1e-3


@pytest.mark.parametrize("seed", [0, 5])
def test_gelu_backward_matches_fd(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=12).astype(np.float32)
    dy = rng.normal(size=12).astype(np.float32)

    def loss(t):
        return float((nx.gelu(t) * dy).sum())

    fd = nx.finite_difference_gradient(loss, x)
    assert _rel_err(nx.gelu_backward(x, dy).astype(np.float64), fd) < 1e-3


@pytest.mark.parametrize("seed", [0, 9])
def test_softmax_backward_matches_fd(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(3, 5)).astype(np.float32)
    dy = rng.normal(size=(3, 5)).astype(np.float32)
    y = nx.softmax_last_dim(x)

    def loss(t):
        return float((nx.softmax_last_dim(t) * dy).sum())

    fd = nx.finite_difference_gradient(loss, x)
    assert _rel_err(nx.softmax_backward(y, dy).astype(np.float64), fd) < 1e-3


def test_matmul_backward_matches_fd():
    rng = np.random.default_rng(6)
    a = rng.normal(size=(3, 4)).astype(np.float32)
    b = rng.normal(size=(4, 2)).astype(np.float32)
    dy = rng.normal(size=(3, 2)).astype(np.float32)
    da = nx.matmul(dy, b.T)
    db = nx.matmul(a.T, dy)

    fd_a = nx.finite_difference_gradient(lambda t: float((t @ b * dy).sum()), a)
    fd_b = nx.finite_difference_gradient(lambda t: float((a @ t * dy).sum()), b)
    assert _rel_err(da.astype(np.float64), fd_a) < 1e-3
    assert _rel_err(db.astype(np.float64), fd_b) < 1e-3


def test_backward_without_context_is_a_usage_error():
    dy = np.ones(3, np.float32)
    with pytest.raises(UsageError):
        nx.layer_norm_bwd(None, dy)
    with pytest.raises(UsageError):
        nx.softmax_backward(None, dy)
    with pytest.raises(UsageError):
        nx.gelu_backward(None, dy)


# ---------------------------------------------------------------------------
# finite differences


def test_fd_on_sum_of_squares():
    grad = nx.finite_difference_gradient(
        lambda t: float((t * t).sum()), np.array([1.0, 2.0], np.float32), h=1e-4
    )
    np.testing.assert_allclose(grad, [2.0, 4.0], atol=1e-6)


def test_fd_constant_function_is_zero():
    grad = nx.finite_difference_gradient(lambda t: 3.5, np.ones((2, 2), np.float32))
    assert np.array_equal(grad, np.zeros((2, 2)))


def test_fd_rejects_nonpositive_step():
    with pytest.raises(ParameterError):
        nx.finite_difference_gradient(lambda t: 0.0, np.ones(2), h=0.0)


def test_exported_ops_stay_float32_and_finite(rng):
    x = rng.normal(size=(4, 8)).astype(np.float32)
    w = rng.normal(size=(8, 8)).astype(np.float32)
    for out in (
        nx.matmul(x, w),
        nx.softmax_last_dim(x),
        nx.layer_norm(x, np.ones(8, np.float32), np.zeros(8, np.float32)),
        nx.gelu(x),
        nx.bias_add(x, np.ones(8, np.float32)),
    ):
        assert out.dtype == np.float32
        assert np.isfinite(out).all()
