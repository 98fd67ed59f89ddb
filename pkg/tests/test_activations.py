import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from numpy.testing import assert_allclose, assert_array_equal

from coman import diffcore as dc
from coman.activations import (
    ActivationSelection,
    CluParams,
    ConvexBase,
    FpmParams,
    clu,
    clu_derivative,
    clu_graph,
    combined,
    concave,
    concave_from,
    elu,
    fpm,
    fpm_slope,
    heaviside_approx,
    relu,
    saturated,
    saturated_from,
)

P21 = CluParams(2.0, 1.0)

valid_clu = st.tuples(st.floats(0.05, 8.0), st.floats(0.01, 1.0)).map(
    lambda ab: CluParams(ab[0], 4.0 * ab[1] / ab[0]))


def test_clu_examples():
    for p in (CluParams(), P21, CluParams(0.5, 3.0)):
        assert clu(2.5, p) == 2.5
        assert clu(0.0, p) == 0.0
    assert abs(clu(-np.log(3.0), P21) - (-0.5)) < 1e-15
    assert abs(clu(-40.0, P21) + 1.0) < 1e-12


def test_clu_params_validation():
    with pytest.raises(ValueError):
        CluParams(0.0, 1.0)
    with pytest.raises(ValueError):
        CluParams(1.0, -1.0)
    with pytest.raises(ValueError, match="exceeds"):
        CluParams(4.0, 2.0)
    CluParams(2.0, 2.0)  # product exactly 4 is allowed
    assert CluParams.unchecked(4.0, 2.0).omega0 == 4.0


def test_concave_examples():
    assert concave(0.0, P21) == 0.0
    assert concave(-2.5, P21) == -2.5
    assert abs(concave(np.log(3.0), P21) - 0.5) < 1e-15


def test_saturated_examples():
    p = P21
    assert saturated(0.0, p) == 0.0
    x = np.linspace(-0.99, -0.01, 50)
    assert_allclose(saturated(x, p), x, rtol=0, atol=1e-15)
    assert abs(saturated(-50.0, p) + 2.0) < 1e-9


def test_saturated_bounds():
    rng = np.random.default_rng(0)
    for p in (CluParams(), P21, CluParams(0.3, 10.0)):
        x = rng.uniform(-100, 100, 10_000)
        assert np.all(np.abs(saturated(x, p)) <= p.omega0 / 2 + clu(1.0, p) + 1e-12)


def test_reflection_identity_exact():
    x = np.random.default_rng(1).uniform(-10, 10, 1000)
    for p in (CluParams(), P21):
        assert_array_equal(concave(x, p), -clu(-x, p))


def test_class_membership():
    for p in (CluParams(), P21, CluParams(0.7, 5.0)):
        assert clu(0.0, p) == 0.0
        assert abs(clu(-1e3, p) - (-p.omega0 / 2)) < 1e-12
        assert np.all(clu(np.linspace(-1e3, 0, 100), p) >= -p.omega0 / 2)


@pytest.mark.parametrize("name", ["clu", "concave", "saturated", "fpm", "heaviside"])
def test_strictly_increasing_on_grid(name):
    x = np.sort(np.random.default_rng(2).uniform(-6, 6, 10_000))
    x = np.unique(x)
    f = {
        "clu": lambda v: clu(v, P21),
        "concave": lambda v: concave(v, P21),
        "saturated": lambda v: saturated(v, P21),
        "fpm": lambda v: fpm(v, FpmParams(0.1, 1.5, 0.3, 0.8)),
        "heaviside": lambda v: heaviside_approx(v, 2.0, P21),
    }[name]
    assert np.all(np.diff(f(x)) > 0)


@settings(max_examples=60, deadline=None)
@given(valid_clu, st.integers(0, 2**31))
def test_clu_midpoint_convexity(p, seed):
    rng = np.random.default_rng(seed)
    x, y = rng.uniform(-10, 10, (2, 2000))
    assert np.all(clu((x + y) / 2, p) <= (clu(x, p) + clu(y, p)) / 2 + 1e-12)
    assert np.all(concave((x + y) / 2, p) >= (concave(x, p) + concave(y, p)) / 2 - 1e-12)


def test_junction_counterexample():
    p = CluParams.unchecked(4.0, 2.0)
    rng = np.random.default_rng(0)
    x = rng.uniform(-1, 0, 10_000)
    y = rng.uniform(0, 1, 10_000)
    violations = clu((x + y) / 2, p) > (clu(x, p) + clu(y, p)) / 2 + 1e-12
    assert violations.any()


def test_clu_derivative_matches_finite_differences():
    x = np.random.default_rng(3).uniform(-4, 4, 200)
    x = x[np.abs(x) > 1e-3]
    for p in (CluParams(), P21):
        num = (clu(x + 1e-6, p) - clu(x - 1e-6, p)) / 2e-6
        assert_allclose(clu_derivative(x, p), num, rtol=1e-6, atol=1e-9)


def test_clu_graph_gradients_in_input_and_shape():
    rng = np.random.default_rng(4)
    x = dc.Parameter(rng.uniform(-2, 2, (4, 5)))
    w0 = dc.Parameter(1.5)
    w1 = dc.Parameter(2.0)
    wts = rng.uniform(-1, 1, (4, 5))
    report = dc.check_gradients(lambda: dc.sum_(clu_graph(x, w0, w1) * wts), {"x": x, "w0": w0, "w1": w1}, seed=4)
    assert report.ok, report.failures


@pytest.mark.parametrize("unit", ["concave", "saturated"])
def test_derived_unit_graph_gradients(unit):
    rng = np.random.default_rng(5)
    x = dc.Parameter(rng.uniform(-2, 2, (3, 6)))
    w0, w1 = dc.Parameter(1.2), dc.Parameter(1.5)
    build = concave_from if unit == "concave" else saturated_from
    wts = rng.uniform(-1, 1, (3, 6))
    report = dc.check_gradients(lambda: dc.sum_(build(ConvexBase(w0, w1))(x) * wts),
                                {"x": x, "w0": w0, "w1": w1}, seed=5)
    assert report.ok, report.failures


def test_graph_and_numpy_paths_agree():
    x = np.random.default_rng(6).uniform(-3, 3, (5, 7))
    base = ConvexBase(2.0, 1.0)
    for build in (lambda b: b, concave_from, saturated_from):
        assert_allclose(build(base)(dc.constant(x)).value, build(base)(x), rtol=0, atol=1e-15)


def test_combined_examples():
    h = np.random.default_rng(7).uniform(-3, 3, 9)
    assert_array_equal(combined(h, ActivationSelection(9, 0, 0), P21), clu(h, P21))
    assert_array_equal(combined(h, ActivationSelection(0, 9, 0), P21), concave(h, P21))
    sel = ActivationSelection(2, 3, 4)
    out = combined(h, sel, P21)
    assert_array_equal(out[:2], clu(h[:2], P21))
    assert_array_equal(out[2:5], concave(h[2:5], P21))
    assert_array_equal(out[5:], saturated(h[5:], P21))
    assert_array_equal(combined(np.zeros(9), sel, P21), np.zeros(9))
    with pytest.raises(ValueError):
        combined(h, ActivationSelection(1, 1, 1), P21)


def test_selection_split():
    assert ActivationSelection.split(16) == ActivationSelection(6, 5, 5)
    assert ActivationSelection.split(4, "concave") == ActivationSelection(0, 4, 0)
    assert ActivationSelection.split(7).width == 7
    with pytest.raises(ValueError):
        ActivationSelection(-1, 2, 0)


def test_heaviside_examples():
    for a in (0.5, 1.0, 100.0):
        assert heaviside_approx(0.0, a, P21) == 0.5
    assert heaviside_approx(1.0, 100.0, P21) >= 0.99
    assert heaviside_approx(-1.0, 100.0, P21) <= 0.01
    x = np.linspace(-50, 50, 1001)
    v = heaviside_approx(x, 3.0, P21)
    assert np.all((v >= 0) & (v <= 1))
    with pytest.raises(ValueError):
        heaviside_approx(0.0, 0.0)


def heaviside_sup_distance(a: float, window: float, p: CluParams = P21) -> float:
    """Sup distance to the unit step over ``|x| >= window``.

    The approximant is increasing and tends to its limits monotonically, so
    the sup is attained at the window edge.
    """
    edge = np.array([-window, window])
    tail = np.concatenate([-np.geomspace(window, 1e3, 2000), np.geomspace(window, 1e3, 2000)])
    x = np.concatenate([edge, tail])
    return float(np.max(np.abs(heaviside_approx(x, a, p) - (x > 0))))


def test_heaviside_distance_is_scale_invariant_for_shrinking_window():
    # excluding (-1/a, 1/a) sees the same profile at every scale
    d = [heaviside_sup_distance(2.0 ** k, 2.0 ** -k) for k in range(9)]
    expected = 1 - heaviside_approx(1.0, 1.0, P21)
    assert_allclose(d, expected, rtol=1e-12)
    assert expected == pytest.approx(0.25, abs=1e-15)


@pytest.mark.parametrize("window", [0.1, 1 / 256])
def test_heaviside_distance_decreases_for_fixed_window(window):
    d = [heaviside_sup_distance(2.0 ** k, window) for k in range(9)]
    assert all(b < a for a, b in zip(d, d[1:])), d


def test_fpm_examples():
    p = FpmParams(0.1, 1.7, 2.0, 0.6)
    assert abs(fpm(p.omega2, p) - 0.35) < 1e-15
    assert abs(fpm(1e4, p) - p.omega3) < 1e-12
    assert abs(fpm(-1e4, p) - p.omega0) < 1e-12
    num = (fpm(p.omega2 + 1e-6, p) - fpm(p.omega2 - 1e-6, p)) / 2e-6
    assert abs(num - p.omega1 * (p.omega3 - p.omega0) / 4) < 1e-8
    assert fpm_slope(p.omega2, p) == pytest.approx(p.omega1 * (p.omega3 - p.omega0) / 4, rel=1e-15)


def test_fpm_params_validation():
    with pytest.raises(ValueError):
        FpmParams(0.5, 1.0, 0.0, 0.5)
    with pytest.raises(ValueError):
        FpmParams(0.1, 0.0, 0.0, 0.5)
    with pytest.raises(ValueError):
        FpmParams(-0.1, 1.0, 0.0, 0.5)


def test_relu_elu_baselines():
    x = np.array([-2.0, 0.0, 1.5])
    assert_array_equal(relu(x), [0.0, 0.0, 1.5])
    assert_allclose(elu(x), [np.expm1(-2.0), 0.0, 1.5])
    assert_allclose(elu(dc.constant(x)).value, elu(x))
