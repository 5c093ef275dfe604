import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from localcal.errors import DegenerateCovariance, InvalidBracket, NonFiniteInput
from localcal.numerics import (
    AdamState,
    PcaProjection,
    adam_step,
    fit_pca,
    golden_section_min,
    js_divergence,
    jsd_distance,
    log_softmax,
    make_rng,
    pav_isotonic,
    softmax,
)

from oracles import isotonic_brute_force

# reference values computed offline at 50 significant digits
JSD_09_01 = 0.60668295440740468352  # jsd_distance((.9,.1),(.1,.9))
SQRT_LN2 = 0.83255461115769775635
SOFTMAX_2_0 = 0.88079707797788244406
ADAM_X2_100 = 0.002936675681102549  # 100 steps, lr 0.1, on x^2 from x=1

simplex_rows = arrays(np.float64, st.integers(2, 6), elements=st.floats(0.0, 1.0)).filter(lambda v: v.sum() > 1e-3)


def test_rng_streams_are_reproducible_and_distinct():
    a = make_rng(5, "x").random(4)
    np.testing.assert_array_equal(a, make_rng(5, "x").random(4))
    assert not np.array_equal(a, make_rng(5, "y").random(4))
    assert not np.array_equal(a, make_rng(6, "x").random(4))


def test_softmax_reference():
    assert softmax([2.0, 0.0])[0] == pytest.approx(SOFTMAX_2_0, abs=1e-15)
    np.testing.assert_allclose(softmax([1000.0, 1000.0]), [0.5, 0.5])
    with pytest.raises(NonFiniteInput):
        softmax([np.inf, 0.0])


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, (3, 4), elements=st.floats(-50, 50)), st.floats(-100, 100))
def test_softmax_shift_invariance(z, c):
    p = softmax(z)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)
    np.testing.assert_allclose(softmax(z + c), p, atol=1e-12)
    np.testing.assert_allclose(np.exp(log_softmax(z)), p, atol=1e-12)


def test_jsd_reference_values():
    assert jsd_distance([0.9, 0.1], [0.1, 0.9]) == pytest.approx(JSD_09_01, abs=1e-14)
    assert jsd_distance([1.0, 0.0], [0.0, 1.0]) == pytest.approx(SQRT_LN2, abs=1e-14)
    assert jsd_distance([0.3, 0.7], [0.3, 0.7]) == 0.0


@settings(max_examples=150, deadline=None)
@given(simplex_rows, st.data())
def test_jsd_is_a_bounded_symmetric_metric(p, data):
    p = p / p.sum()
    q = data.draw(arrays(np.float64, p.shape, elements=st.floats(0.0, 1.0)).filter(lambda v: v.sum() > 1e-3))
    r = data.draw(arrays(np.float64, p.shape, elements=st.floats(0.0, 1.0)).filter(lambda v: v.sum() > 1e-3))
    q, r = q / q.sum(), r / r.sum()
    d_pq = float(jsd_distance(p, q))
    assert 0.0 <= d_pq <= SQRT_LN2 + 1e-12
    assert d_pq == pytest.approx(float(jsd_distance(q, p)), abs=1e-12)
    assert float(js_divergence(p, q)) >= -1e-15
    assert d_pq <= float(jsd_distance(p, r)) + float(jsd_distance(r, q)) + 1e-9


def test_pca_recovers_dominant_axis():
    rng = make_rng(0, "pca")
    X = np.c_[rng.normal(0, 10, 500), rng.normal(0, 1, 500), rng.normal(0, 0.1, 500)]
    pca = fit_pca(X, 2)
    assert pca.dim == 2
    assert abs(pca.components[0, 0]) == pytest.approx(1.0, abs=1e-2)
    Y = pca.project(X)
    np.testing.assert_allclose(Y.mean(axis=0), 0, atol=1e-10)
    back = PcaProjection.from_dict(pca.to_dict())
    np.testing.assert_array_equal(back.project(X), Y)


def test_pca_degenerate_warns():
    X = np.c_[np.arange(10.0), np.zeros(10), np.zeros(10)]
    with pytest.warns(DegenerateCovariance):
        pca = fit_pca(X, 2)
    # complement stays orthonormal
    np.testing.assert_allclose(pca.components @ pca.components.T, np.eye(2), atol=1e-12)


def test_pav_small_cases():
    np.testing.assert_allclose(pav_isotonic([3.0, 1.0, 2.0]), [2.0, 2.0, 2.0])
    np.testing.assert_allclose(pav_isotonic([1.0, 0.0], [3.0, 1.0]), [0.75, 0.75])
    np.testing.assert_allclose(pav_isotonic([0.0, 1.0]), [0.0, 1.0])


@settings(max_examples=200, deadline=None)
@given(
    st.lists(st.floats(-5, 5, allow_nan=False), min_size=1, max_size=8),
    st.data(),
)
def test_pav_matches_brute_force(y, data):
    w = data.draw(st.lists(st.floats(0.1, 5), min_size=len(y), max_size=len(y)))
    got = pav_isotonic(y, w)
    np.testing.assert_allclose(got, isotonic_brute_force(y, w), atol=1e-9)
    assert np.all(np.diff(got) >= -1e-12)


def test_golden_section():
    x = golden_section_min(lambda t: (t - 2.5) ** 2, 0.0, 10.0, tol=1e-8)
    assert x == pytest.approx(2.5, abs=1e-7)
    x = golden_section_min(lambda t: math.cosh(t - 1.0), -3.0, 4.0, tol=1e-6)
    assert x == pytest.approx(1.0, abs=2e-6)
    with pytest.raises(InvalidBracket):
        golden_section_min(lambda t: t, 1.0, 1.0)


def test_adam_reference_trajectory():
    state = AdamState(lr=0.1)
    params = {"x": np.array(1.0)}
    for _ in range(100):
        params = adam_step(state, params, {"x": 2 * params["x"]})
    assert float(params["x"]) == pytest.approx(ADAM_X2_100, rel=1e-12)
    assert state.step == 100


def test_softmax_symmetric_and_large():
    np.testing.assert_array_equal(softmax([0.0, 0.0]), [0.5, 0.5])
    p = softmax([1000.0, 0.0])
    assert p[0] == 1.0 and 0.0 <= p[1] < 1e-300


def test_pca_line_and_isometry():
    t = np.linspace(-3, 3, 20)
    X = np.c_[t, np.zeros(20), np.zeros(20)]
    with pytest.warns(DegenerateCovariance):
        fit_pca(X, 2)
    np.testing.assert_allclose(np.abs(fit_pca(X, 1).components[0]), [1.0, 0.0, 0.0], atol=1e-12)
    rng = make_rng(1, "iso")
    Y = rng.normal(size=(40, 3))
    full = fit_pca(Y, 3)
    Z = full.project(Y)
    Yc = Y - Y.mean(axis=0)
    np.testing.assert_allclose(Z @ Z.T, Yc @ Yc.T, atol=1e-10)


def test_pca_reconstruction_error_is_discarded_variance():
    X = make_rng(2, "cloud").normal(size=(300, 4))
    pca = fit_pca(X, 2)
    Xc = X - X.mean(axis=0)
    evals = np.sort(np.linalg.eigvalsh(Xc.T @ Xc / (X.shape[0] - 1)))[::-1]
    resid = X - pca.reconstruct(pca.project(X))
    err = np.sum(resid**2) / (X.shape[0] - 1)
    assert err == pytest.approx(evals[2:].sum(), abs=1e-8)


def test_pav_sorted_and_reversed():
    y = np.array([0.1, 0.2, 0.2, 0.7])
    np.testing.assert_array_equal(pav_isotonic(y), y)
    np.testing.assert_allclose(pav_isotonic([0.0, 1.0, 0.0, 1.0]), [0.0, 0.5, 0.5, 1.0])
    w = np.array([1.0, 2.0, 3.0])
    np.testing.assert_allclose(pav_isotonic([3.0, 2.0, 1.0], w), np.full(3, (3 + 4 + 3) / 6))


def test_golden_section_named_cases():
    assert golden_section_min(lambda t: (t - 3) ** 2, 0, 10, tol=1e-6) == pytest.approx(3.0, abs=1e-6)
    assert golden_section_min(lambda t: abs(t - 1), 0, 2, tol=1e-6) == pytest.approx(1.0, abs=1e-6)


def test_golden_section_matches_grid_scan_on_nll():
    from localcal.metrics import nll_from_logits

    rng = make_rng(3, "nll")
    z = rng.normal(0, 3, size=(500, 3))
    y = rng.integers(0, 3, 500)
    grid = np.linspace(0.05, 20, 4000)
    best = grid[np.argmin([nll_from_logits(z / t, y) for t in grid])]
    got = golden_section_min(lambda t: nll_from_logits(z / t, y), 0.05, 20, tol=1e-6)
    assert abs(got - best) <= 2 * (grid[1] - grid[0])


def test_adam_zero_and_constant_gradients():
    state = AdamState(lr=0.01)
    p = {"w": np.array([1.0, -2.0])}
    out = adam_step(state, p, {"w": np.zeros(2)})
    np.testing.assert_array_equal(out["w"], p["w"])
    assert state.step == 1
    for _ in range(50):
        out = adam_step(state, out, {"w": np.array([0.3, -0.3])})
    assert out["w"][0] < 1.0 and out["w"][1] > -2.0
