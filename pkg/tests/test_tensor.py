import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fishermerge import tensor as T


def test_matmul_examples():
    a = T.tensor([[1, 2], [3, 4]])
    np.testing.assert_array_equal(T.matmul(a, np.eye(2)), a)
    np.testing.assert_array_equal(T.matmul(np.eye(2), T.tensor([[5], [7]])), [[5], [7]])
    np.testing.assert_array_equal(T.matmul(a, T.tensor([[1], [1]])), [[3], [7]])


def test_matmul_shape_mismatch():
    with pytest.raises(ValueError):
        T.matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_tensor_from_flat_data():
    x = T.tensor([1, 2, 3, 4, 5, 6], shape=[2, 3])
    assert x.shape == (2, 3) and x[1, 0] == 4.0
    with pytest.raises(ValueError):
        T.tensor([1, 2, 3], shape=[2, 2])
    with pytest.raises(ValueError):
        T.tensor([], shape=[0])


def test_non_finite_is_an_error():
    with pytest.raises(T.NonFiniteError):
        T.tensor([1.0, np.nan])
    with pytest.raises(T.NonFiniteError):
        T.softmax(np.array([np.inf, 0.0]))
    with pytest.raises(T.NonFiniteError):
        T.scale(np.array([1e308]), 10.0)
    with pytest.raises(T.NonFiniteError):
        T.gelu(np.array([np.nan]))


def test_elementwise_ops():
    a, b = T.tensor([1.0, 2.0]), T.tensor([3.0, 5.0])
    np.testing.assert_array_equal(T.add(a, b), [4.0, 7.0])
    np.testing.assert_array_equal(T.mul(a, b), [3.0, 10.0])
    np.testing.assert_array_equal(T.scale(a, -2), [-2.0, -4.0])
    with pytest.raises(ValueError):
        T.add(a, np.ones(3))


def test_softmax_uniform():
    np.testing.assert_array_equal(T.softmax(np.array([0.0, 0.0])), [0.5, 0.5])


def test_softmax_large_logits_match_extended_precision():
    x = [1000.0, 0.0]
    with mpmath.workdps(50):
        e = [mpmath.exp(mpmath.mpf(v) - 1000) for v in x]
        ref = [float(v / sum(e)) for v in e]
    got = T.softmax(np.array(x))
    assert np.all(np.isfinite(got))
    np.testing.assert_allclose(got, ref, rtol=1e-15, atol=1e-300)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.integers(1, 8), elements=st.floats(-50, 50)), st.floats(-100, 100))
def test_softmax_shift_invariance(x, c):
    p = T.softmax(x)
    assert abs(p.sum() - 1.0) < 1e-12
    np.testing.assert_allclose(T.softmax(x + c), p, rtol=0, atol=1e-12)


def test_gelu_fixed_point_and_reference():
    assert T.gelu(np.array([0.0]))[0] == 0.0
    xs = np.linspace(-4, 4, 17)
    ref = [float(x * mpmath.ncdf(x)) for x in xs]
    np.testing.assert_allclose(T.gelu(xs), ref, rtol=1e-14, atol=1e-15)


def test_gelu_grad_matches_central_difference():
    xs = np.linspace(-3, 3, 13)
    h = 1e-6
    fd = (T.gelu(xs + h) - T.gelu(xs - h)) / (2 * h)
    np.testing.assert_allclose(T.gelu_grad(xs), fd, rtol=1e-8, atol=1e-9)


def test_layer_norm_standardizes_rows(rng):
    x = rng.normal(3.0, 5.0, size=(4, 16))
    y, xhat, _ = T.layer_norm(x, np.ones(16), np.zeros(16))
    np.testing.assert_allclose(y.mean(axis=-1), 0.0, atol=1e-12)
    np.testing.assert_allclose(y.var(axis=-1), 1.0, rtol=1e-10)
    np.testing.assert_array_equal(y, xhat)


def test_layer_norm_backward_matches_central_difference(rng):
    x = rng.normal(size=(2, 6))
    gain, bias = rng.normal(size=6), rng.normal(size=6)
    w = rng.normal(size=(2, 6))
    f = lambda z: float((T.layer_norm(z, gain, bias)[0] * w).sum())
    _, xhat, rstd = T.layer_norm(x, gain, bias)
    analytic = T.layer_norm_backward(w, xhat, rstd, gain)
    fd = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += 1e-6
        xm[idx] -= 1e-6
        fd[idx] = (f(xp) - f(xm)) / 2e-6
    np.testing.assert_allclose(analytic, fd, rtol=1e-6, atol=1e-9)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 5), st.integers(1, 5), st.integers(1, 5), st.integers(1, 5), st.integers(0, 2**31))
def test_matmul_associativity(m, n, p, q, seed):
    r = np.random.default_rng(seed)
    a, b, c = r.normal(size=(m, n)), r.normal(size=(n, p)), r.normal(size=(p, q))
    left = T.matmul(T.matmul(a, b), c)
    right = T.matmul(a, T.matmul(b, c))
    scale = np.abs(a) @ np.abs(b) @ np.abs(c)
    assert np.all(np.abs(left - right) <= 1e-9 * scale)


def test_binary_layout_little_endian_row_major():
    x = T.tensor([[1.0, 2.0], [3.0, -0.5]])
    raw = T.to_bytes(x)
    assert raw == np.array([1.0, 2.0, 3.0, -0.5], dtype="<f8").tobytes()
    assert len(raw) == 32
    np.testing.assert_array_equal(T.from_bytes(raw, (2, 2)), x)
    with pytest.raises(ValueError):
        T.from_bytes(raw, (3, 2))
