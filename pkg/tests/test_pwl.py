import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import integrate as sci

from neumat import funcs, pwl
from neumat.errors import ArgumentError, CapacityError, DomainError

E = math.e
IDENT = funcs.linear(1.0, 0.0)


def quad_mean(f, a, b):
    v, _ = sci.quad(lambda x: float(f(x)), a, b, epsabs=1e-13, epsrel=1e-12, limit=200)
    return v / (b - a)


def quad_seg_mse(f, k, c, a, b):
    v, _ = sci.quad(lambda x: (float(f(x)) - (k * x + c)) ** 2, a, b, epsabs=1e-15, epsrel=1e-13, limit=200)
    return v / (b - a)


# ---------------------------------------------------------------- fit_uniform

def test_exp_single_segment_chord():
    t = pwl.fit_uniform("exp", (0, 1), 1)
    assert t.k[0] == pytest.approx(E - 1, abs=1e-12)
    assert t.b[0] == pytest.approx(1.0, abs=1e-15)
    assert not t.corrected and t.uniform


def test_gelu_even_n_zero_at_midpoint():
    for n in (2, 8, 16, 64):
        t = pwl.fit_uniform("gelu", (-8, 8), n)
        assert pwl.evaluate(t, 0.0) == 0.0


@pytest.mark.parametrize("slope,icpt", [(2.0, -1.0), (-0.3, 5.0), (0.0, 1.5)])
def test_affine_chords_are_exact(slope, icpt):
    f = funcs.linear(slope, icpt)
    t = pwl.fit_uniform(f, (-3, 4), 7)
    np.testing.assert_allclose(t.k, slope, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(t.b, icpt, rtol=1e-12, atol=1e-12)
    assert pwl.mse(f, t) <= 1e-15
    c = pwl.vertical_bias_correction(f, t)
    np.testing.assert_allclose(c.b, t.b, atol=1e-12)


def test_fit_uniform_errors():
    with pytest.raises(ArgumentError):
        pwl.fit_uniform("exp", (0, 1), 0)
    with pytest.raises(DomainError):
        pwl.fit_uniform("reciprocal", (-1, 1), 4)
    with pytest.raises(ArgumentError):
        pwl.fit_uniform("exp", (1, 1), 4)


@given(st.sampled_from(["exp", "gelu", "tanh", "sigmoid", "erf"]), st.floats(-6, 2), st.floats(0.1, 6),
       st.integers(1, 40))
def test_interpolates_breakpoints_and_is_continuous(name, lo, w, n):
    f = funcs.get(name)
    t = pwl.fit_uniform(f, (lo, lo + w), n)
    X = t.breakpoints
    for i, x in enumerate(X):
        assert abs(pwl.evaluate(t, x) - f(float(x))) <= 1e-9 * max(1.0, abs(f(float(x))))
        if 0 < i < t.n:
            left = t.k[i - 1] * x + t.b[i - 1]
            right = t.k[i] * x + t.b[i]
            assert abs(left - right) <= 1e-9 * max(1.0, abs(right))


# ---------------------------------------------------------------- bias correction

def test_exp_correction_example():
    t = pwl.vertical_bias_correction("exp", pwl.fit_uniform("exp", (0, 1), 1))
    dE = (E - 1) - (1 + E) / 2
    assert dE == pytest.approx(-0.140859, abs=1e-6)
    assert t.b[0] == pytest.approx(1 + dE, abs=1e-12)
    assert t.b[0] == pytest.approx(0.859141, abs=1e-6)
    assert t.corrected
    assert pwl.evaluate(t, 0.5) == pytest.approx(1.718282, abs=1e-6)


def test_expectation_bias_matches_quadrature():
    t = pwl.fit_uniform("gelu", (-8, 8), 16)
    dE = pwl.expectation_bias("gelu", t)
    X = t.breakpoints
    for i in range(t.n):
        a, b = X[i], X[i + 1]
        ref = quad_mean(funcs.GELU, a, b) - 0.5 * (funcs.GELU(a) + funcs.GELU(b))
        assert dE[i] == pytest.approx(ref, abs=1e-11)


def test_correction_identity_exp_0_4_n8():
    f = funcs.EXP
    t = pwl.fit_uniform(f, (0, 4), 8)
    c = pwl.vertical_bias_correction(f, t)
    dE = pwl.expectation_bias(f, t)
    X = t.breakpoints
    for i in range(8):
        before = quad_seg_mse(f, t.k[i], t.b[i], X[i], X[i + 1])
        after = quad_seg_mse(f, c.k[i], c.b[i], X[i], X[i + 1])
        assert after == pytest.approx(before - dE[i] ** 2, rel=1e-9)
    w = np.diff(X) / 4.0
    assert pwl.mse(f, c) == pytest.approx(pwl.mse(f, t) - float(np.sum(w * dE**2)), rel=1e-9)


def test_threshold_skips_small_biases():
    t = pwl.fit_uniform("exp", (0, 4), 8)
    dE = pwl.expectation_bias("exp", t)
    th = float(np.median(np.abs(dE)))
    c = pwl.vertical_bias_correction("exp", t, th)
    moved = c.b != t.b
    np.testing.assert_array_equal(moved, np.abs(dE) > th)


def test_double_correction_rejected():
    c = pwl.vertical_bias_correction("exp", pwl.fit_uniform("exp", (0, 1), 2))
    with pytest.raises(ArgumentError):
        pwl.vertical_bias_correction("exp", c)


@pytest.mark.parametrize("name,rng", [("exp", (-3, 3)), ("reciprocal", (0.1, 10)), ("square", (-2, 5))])
def test_convex_bias_nonpositive(name, rng):
    t = pwl.fit_uniform(name, rng, 12)
    assert np.all(pwl.expectation_bias(name, t) <= 1e-15)


@pytest.mark.parametrize("name,rng", [("sqrt", (0.01, 4)), ("rsqrt", (0.5, 4))])
def test_sign_of_bias_follows_curvature(name, rng):
    t = pwl.fit_uniform(name, rng, 10)
    dE = pwl.expectation_bias(name, t)
    if name == "sqrt":
        assert np.all(dE >= -1e-15)  # concave
    else:
        assert np.all(dE <= 1e-15)   # convex


@given(st.sampled_from(["exp", "gelu", "sqrt", "tanh"]), st.integers(1, 24))
def test_correction_never_increases_mse(name, n):
    rng = {"exp": (0, 4), "gelu": (-8, 8), "sqrt": (0.01, 4), "tanh": (-3, 3)}[name]
    t = pwl.fit_uniform(name, rng, n)
    c = pwl.vertical_bias_correction(name, t)
    assert pwl.mse(name, c) <= pwl.mse(name, t) * (1 + 1e-12) + 1e-18


def test_gelu_16_corrected_reduction():
    t = pwl.fit_uniform("gelu", (-8, 8), 16)
    c = pwl.vertical_bias_correction("gelu", t)
    assert 1 - pwl.mse("gelu", c) / pwl.mse("gelu", t) >= 0.5


def test_mse_uniform_matches_scipy():
    t = pwl.fit_uniform("tanh", (-3, 3), 6)
    ref, _ = sci.quad(lambda x: (math.tanh(x) - pwl.evaluate(t, x)) ** 2, -3, 3,
                      points=list(t.breakpoints[1:-1]), epsabs=1e-15, limit=200)
    assert pwl.mse("tanh", t) == pytest.approx(ref / 6, rel=1e-8, abs=1e-15)


def test_mse_empirical():
    t = pwl.fit_uniform("exp", (0, 2), 4)
    xs = np.array([0.1, 0.7, 1.9])
    ref = np.mean((np.exp(xs) - np.array([pwl.evaluate(t, x) for x in xs])) ** 2)
    assert pwl.mse("exp", t, samples=xs) == pytest.approx(ref, rel=1e-14)
    with pytest.raises(ArgumentError):
        pwl.mse("exp", t, samples=[])


# ---------------------------------------------------------------- horizontal sizing

def test_linear_fixed_steps():
    seg = pwl.horizontal_size_optimization(IDENT, pwl.ElasticConfig(0.5, 0.5), (0, 2))
    np.testing.assert_allclose(seg.breakpoints, [0, 0.5, 1.0, 1.5, 2.0], atol=1e-15)
    assert seg.step_kind == ["fixed"] * 4


def test_exp_first_step_solves_level():
    seg = pwl.horizontal_size_optimization("exp", pwl.ElasticConfig(0.5, 0.5), (0, 2))
    assert seg.breakpoints[1] == pytest.approx(math.log(1.5), abs=1e-9)
    assert seg.step_kind[0] == "solved"


def test_gelu_denser_near_zero():
    seg = pwl.horizontal_size_optimization("gelu", pwl.ElasticConfig(1.0, 0.25), (-6, 6))
    X = seg.breakpoints
    near = np.sum((X >= -1) & (X <= 1))
    flat = np.sum((X >= -6) & (X <= -4))
    assert near > flat
    steps = np.diff(X)
    left = X[:-1] < -4
    np.testing.assert_allclose(steps[left], 1.0, atol=1e-12)


@given(st.sampled_from(["exp", "gelu", "sqrt", "tanh", "sigmoid", "reciprocal"]),
       st.floats(0.05, 2.0), st.floats(0.02, 1.0))
def test_horizontal_bound(name, dlx, dly):
    rng = {"exp": (-2, 3), "gelu": (-6, 6), "sqrt": (0.01, 9), "tanh": (-4, 4), "sigmoid": (-6, 6),
           "reciprocal": (0.2, 5)}[name]
    f = funcs.get(name)
    seg = pwl.horizontal_size_optimization(f, pwl.ElasticConfig(dlx, dly), rng)
    X = seg.breakpoints
    assert X[0] == rng[0] and X[-1] == rng[1]
    assert np.all(np.diff(X) > 0)
    for i, kind in enumerate(seg.step_kind):
        if kind == "fallback":
            continue
        a, b = float(X[i]), float(X[i + 1])
        assert b - a <= dlx + 1e-12 or abs(f(b) - f(a)) <= dly + 1e-8


def test_capacity_error():
    with pytest.raises(CapacityError):
        pwl.horizontal_size_optimization("exp", pwl.ElasticConfig(0.5, 1e-3, max_segments=10), (0, 5))


def test_config_validation():
    with pytest.raises(ArgumentError):
        pwl.ElasticConfig(0.0, 0.1)
    with pytest.raises(ArgumentError):
        pwl.ElasticConfig(0.5, 0.1, e_th=-1)
    with pytest.raises(ArgumentError):
        pwl.ElasticConfig(0.5, math.inf)


# ---------------------------------------------------------------- build_elastic

@pytest.mark.xfail(strict=True, reason=(
    "with dLx=0.5, dLy=0.1 the fixed 0.5-wide segments around GELU's minimum near -0.75 keep a "
    "large chord error while uniform spacing at the same count is finer there"))
def test_gelu_elastic_beats_uniform_same_count():
    cfg = pwl.ElasticConfig(0.5, 0.1, 0.0)
    el = pwl.build_elastic("gelu", (-8, 8), cfg)
    un = pwl.fit_uniform("gelu", (-8, 8), el.n)
    assert pwl.max_abs_error("gelu", el) < pwl.max_abs_error("gelu", un)


def test_build_elastic_degenerate_range():
    with pytest.raises(ArgumentError):
        pwl.build_elastic("exp", (1.0, 1.0), pwl.ElasticConfig(0.5, 0.1))


def test_reciprocal_biases_negative_before_correction():
    cfg = pwl.ElasticConfig(0.5, 0.1, 0.0)
    seg = pwl.horizontal_size_optimization("reciprocal", cfg, (0.1, 10))
    t = pwl.chord_fit("reciprocal", seg.breakpoints)
    assert np.all(pwl.expectation_bias("reciprocal", t) < 0)
    el = pwl.build_elastic("reciprocal", (0.1, 10), cfg)
    assert el.corrected and el.config == cfg
    np.testing.assert_array_equal(el.breakpoints, seg.breakpoints)


# ---------------------------------------------------------------- evaluation / indexing

def test_exp_table_evaluation_examples():
    t = pwl.fit_uniform("exp", (0, 1), 1)
    assert pwl.evaluate(t, 0.0) == 1.0
    assert pwl.evaluate(t, 1.0) == pytest.approx(E, abs=1e-15)
    assert pwl.evaluate(t, -1.0) == pytest.approx(1 - (E - 1), abs=1e-12)
    assert pwl.evaluate(t, -1.0) == pytest.approx(-0.718282, abs=1e-6)


def test_segment_index_examples():
    # indices are 0-based: segment i spans [X[i], X[i+1])
    t = pwl.fit_uniform("exp", (0, 4), 8)
    assert pwl.segment_index(t, 0.0) == 0
    assert pwl.segment_index(t, 3.999) == 7
    assert pwl.segment_index(t, 4.0) == 7
    assert pwl.segment_index(t, 100.0) == 7
    assert pwl.segment_index(t, -5.0) == 0


def linear_scan(X, x):
    n = len(X) - 1
    for i in range(n - 1, -1, -1):
        if x >= X[i]:
            return i if i < n else n - 1
    return 0


@pytest.mark.parametrize("uniform", [True, False])
def test_segment_index_vs_linear_scan(rng, uniform):
    if uniform:
        t = pwl.fit_uniform("gelu", (-3.3, 5.1), 37)
    else:
        t = pwl.build_elastic("gelu", (-6, 6), pwl.ElasticConfig(0.7, 0.05))
    X = t.breakpoints
    xs = np.concatenate([rng.uniform(X[0] - 2, X[-1] + 2, 10_000 - 2 * X.size), X, np.nextafter(X, -np.inf)])
    got = pwl.segment_index_batch(t, xs)
    want = np.array([linear_scan(X, x) for x in xs])
    np.testing.assert_array_equal(got, want)
    for x in xs[::97]:
        assert pwl.segment_index(t, x) == linear_scan(X, x)


@given(st.lists(st.floats(-1e3, 1e3, allow_nan=False), min_size=1, max_size=50))
def test_batch_evaluation_bit_identical_to_scalar(xs):
    t = pwl.vertical_bias_correction("gelu", pwl.fit_uniform("gelu", (-8, 8), 16))
    got = pwl.evaluate_batch(t, xs)
    want = np.array([pwl.evaluate(t, x) for x in xs])
    assert np.array_equal(got, want)


def test_extension_continuity():
    t = pwl.fit_uniform("tanh", (-2, 2), 5)
    for x in (t.r_min, t.r_max):
        lo, hi = pwl.evaluate(t, np.nextafter(x, -np.inf)), pwl.evaluate(t, np.nextafter(x, np.inf))
        assert abs(lo - hi) < 1e-12


@pytest.mark.parametrize("n", [16, 32, 64])
def test_gelu_convergence_order(n):
    a = pwl.max_abs_error("gelu", pwl.fit_uniform("gelu", (-8, 8), n))
    b = pwl.max_abs_error("gelu", pwl.fit_uniform("gelu", (-8, 8), 2 * n))
    assert a / b >= 3


# ---------------------------------------------------------------- serialization

@given(st.sampled_from(["exp", "gelu", "reciprocal", "rsqrt"]), st.integers(1, 30), st.booleans())
def test_json_roundtrip_exact(name, n, correct):
    rng = {"exp": (-4, 1), "gelu": (-8, 8), "reciprocal": (0.1, 4), "rsqrt": (1e-3, 2)}[name]
    t = pwl.fit_uniform(name, rng, n)
    if correct:
        t = pwl.vertical_bias_correction(name, t)
    back = pwl.loads(pwl.dumps(t))
    assert back == t
    assert pwl.dumps(back) == pwl.dumps(t)


def test_json_roundtrip_elastic_config(tmp_path):
    t = pwl.build_elastic("gelu", (-8, 8), pwl.ElasticConfig(0.5, 0.1, 0.0))
    p = tmp_path / "t.json"
    pwl.save(t, p)
    assert pwl.load(p) == t


def test_json_schema_fields():
    import json
    d = json.loads(pwl.dumps(pwl.fit_uniform("gelu", (-8, 8), 4)))
    assert {"function", "r_min", "r_max", "uniform", "breakpoints", "k", "b", "corrected", "config"} <= set(d)
    assert all(isinstance(v, str) for v in d["breakpoints"] + d["k"] + d["b"])


def test_malformed_table_rejected():
    with pytest.raises(ArgumentError):
        pwl.from_dict({"function": "exp"})
    with pytest.raises(ArgumentError):
        pwl.PwlTable("exp", [0, 0, 1], [1, 1], [0, 0])


def test_relu_table_exact():
    t = pwl.relu_table()
    xs = np.linspace(-5, 5, 1001)
    np.testing.assert_array_equal(pwl.evaluate_batch(t, xs), np.maximum(xs, 0))
