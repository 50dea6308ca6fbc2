import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import ortho_group

from spt_lab.diagnostics import (NmiCurve, cka_trace, joint_distribution, linear_cka, nmi, nmi_from_joint,
                                 nmi_trace, read_curve_csv, write_curve_csv, write_summary_json)
from spt_lab.prompts import PromptSet
from spt_lab.vit import VitConfig, VitModel


def sigmoid(z):
    return 1.0 / (1.0 + math.exp(-z))


def test_joint_scalar_reference_2x3():
    rng = np.random.default_rng(0)
    P, E = rng.normal(size=(2, 4)), rng.normal(size=(3, 4))
    jd = joint_distribution(P, E)
    raw = [[sigmoid(sum(P[k, t] * E[j, t] for t in range(4))) for j in range(3)] for k in range(2)]
    total = sum(sum(r) for r in raw)
    for k in range(2):
        for j in range(3):
            assert jd.pi[k, j] == pytest.approx(raw[k][j] / total, abs=1e-12)
    np.testing.assert_allclose(jd.marginal_p, jd.pi.sum(1))
    np.testing.assert_allclose(jd.marginal_e, jd.pi.sum(0))


def test_joint_degenerate_cases():
    assert joint_distribution(np.ones((1, 3)), np.ones((1, 3))).pi.tolist() == [[1.0]]
    jd = joint_distribution(np.zeros((3, 4)), np.random.default_rng(0).normal(size=(5, 4)))
    np.testing.assert_allclose(jd.pi, 1 / 15)
    with pytest.raises(ValueError):
        joint_distribution(np.ones((2, 3)), np.ones((2, 4)))


def test_nmi_two_by_two_closed_form():
    P = np.eye(2)
    E = np.array([[10.0, -10.0], [-10.0, 10.0]])
    a, b = sigmoid(10), sigmoid(-10)
    # a + b = 1, so pi = [[a, b], [b, a]] / 2 and both marginals are uniform
    mi = 2 * (a / 2) * math.log((a / 2) / 0.25) + 2 * (b / 2) * math.log((b / 2) / 0.25)
    expected = 2 * mi / (2 * math.log(2))
    assert nmi(P, E) == pytest.approx(expected, abs=1e-6)
    assert nmi(P, E) == pytest.approx((a * math.log(2 * a) + b * math.log(2 * b)) / math.log(2), abs=1e-12)


def test_nmi_zero_for_constant_dots_and_single_token():
    rng = np.random.default_rng(1)
    assert nmi(np.zeros((3, 4)), rng.normal(size=(6, 4))) == pytest.approx(0.0, abs=1e-12)
    assert nmi(rng.normal(size=(1, 4)), rng.normal(size=(1, 4))) == 0.0


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 6), st.integers(1, 8), st.floats(0.1, 30), st.integers(0, 10_000))
def test_nmi_properties(n_p, n_e, scale, seed):
    rng = np.random.default_rng(seed)
    P, E = scale * rng.normal(size=(n_p, 5)), rng.normal(size=(n_e, 5))
    jd = joint_distribution(P, E)
    assert (jd.pi > 0).all()
    assert jd.pi.sum() == pytest.approx(1.0, abs=1e-6)
    v = nmi(P, E)
    assert -1e-12 <= v <= 1 + 1e-6
    assert nmi_from_joint(jd.pi.T) == pytest.approx(nmi_from_joint(jd.pi), abs=1e-9)


def hsic_cka(X, Y):
    n = X.shape[0]
    H = np.eye(n) - np.ones((n, n)) / n
    K, L = X @ X.T, Y @ Y.T

    def hsic(A, B):
        return np.trace(A @ H @ B @ H) / (n - 1) ** 2

    return hsic(K, L) / np.sqrt(hsic(K, K) * hsic(L, L))


def test_cka_matches_hsic_reference():
    rng = np.random.default_rng(2)
    X, Y = rng.normal(size=(5, 3)), rng.normal(size=(5, 4))
    assert linear_cka(X, Y) == pytest.approx(hsic_cka(X, Y), abs=1e-6)


@settings(max_examples=30, deadline=None)
@given(st.integers(3, 12), st.integers(1, 5), st.integers(1, 5), st.floats(0.01, 100), st.integers(0, 10_000))
def test_cka_invariances(n, d1, d2, c, seed):
    rng = np.random.default_rng(seed)
    X, Y = rng.normal(size=(n, d1)), rng.normal(size=(n, d2))
    Q = ortho_group.rvs(d1, random_state=seed) if d1 > 1 else np.array([[-1.0]])
    assert linear_cka(X, X) == pytest.approx(1.0, abs=1e-6)
    assert linear_cka(X, X @ Q) == pytest.approx(1.0, abs=1e-6)
    assert linear_cka(X, c * Y) == pytest.approx(linear_cka(X, Y), abs=1e-6)
    assert linear_cka(X, Y) == pytest.approx(linear_cka(Y, X), abs=1e-6)
    assert -1e-12 <= linear_cka(X, Y) <= 1 + 1e-9


def test_cka_zero_variance_warns():
    with pytest.warns(RuntimeWarning):
        assert linear_cka(np.ones((4, 2)), np.random.default_rng(0).normal(size=(4, 2))) == 0.0
    with pytest.raises(ValueError):
        linear_cka(np.ones((1, 2)), np.ones((1, 2)))


def _toy():
    m = VitModel(VitConfig(image_size=8, patch_size=4, dim=8, depth=3, heads=2), seed=0)
    imgs = np.random.default_rng(0).random((3, 3, 8, 8)).astype(np.float32)
    return m, imgs


@pytest.mark.parametrize("mode", ["shallow", "deep"])
def test_traces_have_depth_entries_and_are_deterministic(mode):
    m, imgs = _toy()
    n = 1 if mode == "shallow" else 3
    ps = PromptSet.from_arrays(mode, [np.random.default_rng(i).normal(size=(2, 8)) for i in range(n)])
    a, b = nmi_trace(m, ps, imgs), nmi_trace(m, ps, imgs)
    assert a.shape == (3,)
    np.testing.assert_array_equal(a, b)
    assert ((a >= 0) & (a <= 1 + 1e-6)).all()
    c = cka_trace(m, ps, imgs)
    assert c.shape == (3, 3)


def test_nmi_trace_is_per_image_average():
    from spt_lab.prompts import PromptTrace
    from spt_lab.vit import forward_features

    m, imgs = _toy()
    ps = PromptSet.from_arrays("deep", [np.random.default_rng(i).normal(size=(2, 8)) for i in range(3)])
    trace = PromptTrace()
    forward_features(imgs, m, ps, trace=trace)
    manual = [np.mean([nmi(trace.prompt_in[i], trace.patch_in[i][b]) for b in range(3)]) for i in range(3)]
    np.testing.assert_allclose(nmi_trace(m, ps, imgs, chunk=2), manual, atol=1e-12)


def test_curve_csv_and_summary_roundtrip(tmp_path):
    curve = NmiCurve(meta={"seed": 0})
    curve.add(0, [0.1, 0.2])
    curve.add(1, np.array([0.3, 0.4]))
    write_curve_csv(tmp_path / "nmi.csv", curve.rows())
    rows = read_curve_csv(tmp_path / "nmi.csv")
    assert rows == [(0, 1, 0.1), (0, 2, 0.2), (1, 1, 0.3), (1, 2, 0.4)]
    assert curve.as_array().shape == (2, 2)
    write_summary_json(tmp_path / "s.json", {"a": np.float32(1.5), "b": np.arange(2)})
    assert "1.5" in (tmp_path / "s.json").read_text()
