import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from spt_lab.tensor import (Tensor, GradCheckError, concat, cross_entropy, gelu, grad_check, layer_norm,
                            matmul, no_grad, precision, relative_error, softmax, default_dtype)


def triple_loop_matmul(a, b):
    n, k = a.shape
    m = b.shape[1]
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 5), st.integers(1, 5), st.integers(1, 5), st.integers(0, 10_000))
def test_matmul_matches_triple_loop(n, k, m, seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(n, k)), rng.normal(size=(k, m))
    with precision(np.float64):
        got = matmul(Tensor(a), Tensor(b)).data
    np.testing.assert_allclose(got, triple_loop_matmul(a, b), rtol=1e-12, atol=1e-12)


def test_batched_matmul_against_weight():
    rng = np.random.default_rng(1)
    a, w = rng.normal(size=(3, 4, 5)), rng.normal(size=(5, 2))
    with precision(np.float64):
        got = matmul(Tensor(a), Tensor(w)).data
    for b in range(3):
        np.testing.assert_allclose(got[b], triple_loop_matmul(a[b], w), rtol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_softmax_rows_sum_to_one_and_match_reference(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(scale=20, size=(3, 7))
    with precision(np.float64):
        got = softmax(Tensor(x)).data
    ref = np.exp(x - x.max(axis=1, keepdims=True))
    ref /= ref.sum(axis=1, keepdims=True)
    np.testing.assert_allclose(got, ref, rtol=1e-12)
    np.testing.assert_allclose(got.sum(axis=1), 1.0, atol=1e-12)


def test_layer_norm_reference():
    rng = np.random.default_rng(2)
    x, g, b = rng.normal(size=(4, 6)), rng.normal(size=6), rng.normal(size=6)
    with precision(np.float64):
        got = layer_norm(Tensor(x), Tensor(g), Tensor(b), eps=1e-6).data
    mu = x.mean(axis=1, keepdims=True)
    var = x.var(axis=1, keepdims=True)
    np.testing.assert_allclose(got, (x - mu) / np.sqrt(var + 1e-6) * g + b, rtol=1e-10)


def test_gelu_tanh_form():
    x = np.linspace(-4, 4, 17)
    with precision(np.float64):
        got = gelu(Tensor(x)).data
    ref = 0.5 * x * (1 + np.tanh(np.sqrt(2 / np.pi) * (x + 0.044715 * x ** 3)))
    np.testing.assert_allclose(got, ref, rtol=1e-12)


def test_cross_entropy_uniform_logits_is_log_k():
    with precision(np.float64):
        loss = cross_entropy(Tensor(np.zeros((5, 4))), np.arange(5) % 4)
    assert loss.item() == pytest.approx(np.log(4))


def test_backward_accumulates_on_leaves_only():
    a = Tensor([1.0, 2.0], requires_grad=True)
    b = a * a
    c = (b + a).sum()
    c.backward()
    np.testing.assert_allclose(a.grad, [3.0, 5.0])
    assert b.grad is None


def test_reused_node_gradient_sums_paths():
    x = Tensor(3.0, requires_grad=True)
    y = x * x * x
    y.backward()
    assert x.grad == pytest.approx(27.0)


def test_no_grad_records_nothing():
    a = Tensor(np.ones(3), requires_grad=True)
    with no_grad():
        b = (a * 2).sum()
    assert not b.requires_grad
    b.backward()
    assert a.grad is None


def test_precision_context_restores_default():
    before = default_dtype()
    with precision(np.float64):
        assert Tensor([1.0]).dtype == np.float64
    assert default_dtype() == before


def test_concat_gradient_splits():
    a = Tensor(np.ones((2, 3)), requires_grad=True)
    b = Tensor(np.ones((2, 1)), requires_grad=True)
    out = concat([a, b], axis=1)
    (out * Tensor(np.arange(8.0).reshape(2, 4))).sum().backward()
    np.testing.assert_allclose(a.grad, [[0, 1, 2], [4, 5, 6]])
    np.testing.assert_allclose(b.grad, [[3], [7]])


def _composite_case(seed=0):
    rng = np.random.default_rng(seed)
    w = Tensor(rng.normal(size=(5, 4)), requires_grad=True, name="w")
    g = Tensor(1 + 0.1 * rng.normal(size=5), requires_grad=True, name="g")
    b = Tensor(0.1 * rng.normal(size=5), requires_grad=True, name="b")
    x = Tensor(rng.normal(size=(3, 2, 5)))
    labels = np.array([0, 3, 1])

    def f():
        h = gelu(layer_norm(x, g, b))
        att = softmax(matmul(h, h.transpose((0, 2, 1))))
        z = matmul(att, h).mean(axis=1)
        return cross_entropy(matmul(z, w), labels)

    return f, [w, g, b]


def test_grad_check_composite_float64():
    with precision(np.float64):
        f, params = _composite_case()
        report = grad_check(f, params)
    assert report.passed, report.per_param
    assert report.n_checked == 20 + 5 + 5


def test_grad_check_detects_wrong_gradient():
    with precision(np.float64):
        p = Tensor(np.array([1.0, 2.0]), requires_grad=True)

        def f():
            out = (p * p).sum()
            original = out._backward
            out._backward = lambda g: tuple(2 * x for x in original(g))  # doubled on purpose
            return out

        report = grad_check(f, [p])
    assert not report.passed
    assert report.max_rel_error == pytest.approx(0.5, rel=1e-6)


def test_grad_check_rejects_nonfinite_loss():
    p = Tensor(np.array([0.0]), requires_grad=True)
    with pytest.raises(GradCheckError):
        grad_check(lambda: (p / p).sum(), [p])


def test_relative_error_floor():
    assert relative_error(np.array(0.0), np.array(0.0)) == 0.0
    assert relative_error(np.array(1e-12), np.array(0.0)) == pytest.approx(1e-4)
    assert relative_error(np.array(2.0), np.array(1.0)) == pytest.approx(0.5)
