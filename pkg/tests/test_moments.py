import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rainbow_rf import moments
from rainbow_rf.verify import KAPPA_GOLDEN


def test_gauss_hermite_order_one():
    x, w = moments.gauss_hermite(1)
    assert x.tolist() == [0.0] and w.tolist() == [1.0]


@pytest.mark.parametrize("order", [2, 16, 64, 200, 512])
def test_gauss_hermite_normalized(order):
    x, w = moments.gauss_hermite(order)
    assert abs(w.sum() - 1) <= 1e-13
    assert abs(w @ x**2 - 1) <= 1e-13


def test_gauss_hermite_fourth_moment():
    x, w = moments.gauss_hermite(64)
    assert abs(w @ x**4 - 3) <= 1e-12


def test_gauss_hermite_exact_to_degree():
    x, w = moments.gauss_hermite(5)
    # E N^8 = 105 needs degree 8 <= 2*5 - 1
    assert abs(w @ x**8 - 105) <= 1e-10


@pytest.mark.parametrize("order", [0, 513, 2.5])
def test_gauss_hermite_order_range(order):
    with pytest.raises(ValueError):
        moments.gauss_hermite(order)


def test_hermite_doubling_on_tanh_square():
    # 64 vs 128 nodes differ by ~3e-9 here; 128 vs 256 is the first pair at 1e-12
    x, w = moments.gauss_hermite(128)
    y, v = moments.gauss_hermite(256)
    assert abs(w @ np.tanh(x) ** 2 - v @ np.tanh(y) ** 2) <= 1e-12


def test_identity_and_sign_closed_forms():
    assert moments.kappa1("identity", 2.5) == 1.0
    assert moments.second_moment("identity", 3.0) == pytest.approx(3.0, abs=1e-12)
    assert moments.kappa_layer("identity", 1.7).kappa_star_sq == 0.0
    assert moments.kappa1("sign", 1.0) == pytest.approx(math.sqrt(2 / math.pi), abs=1e-12)
    for r in (0.1, 1.0, 7.0):
        assert moments.second_moment("sign", r) == pytest.approx(1.0, abs=1e-12)
    layer = moments.kappa_layer("sign", 1.0)
    assert layer.kappa_star_sq == pytest.approx(1 - 2 / math.pi, abs=1e-10)


def test_erf_closed_forms():
    for r in (0.2, 1.0, 3.0):
        assert moments.kappa1("erf", r) == pytest.approx(2 / math.sqrt(math.pi * (1 + 2 * r)), abs=1e-12)
        exact = 2 / math.pi * math.asin(2 * r / (1 + 2 * r))
        assert moments.second_moment("erf", r) == pytest.approx(exact, abs=1e-12)


def test_stein_and_derivative_paths_agree():
    for act in ("tanh", "erf"):
        for r in (0.3, 1.0, 5.0):
            a = moments.kappa1(act, r, method="stein")
            b = moments.kappa1(act, r, method="derivative")
            assert abs(a - b) <= 1e-8


def test_golden_monte_carlo_values():
    got = {
        "kappa1(tanh, r=1)": moments.kappa1("tanh", 1.0),
        "second_moment(tanh, r=0.7)": moments.second_moment("tanh", 0.7),
        "cross_moment(tanh, sign, 1, 1, 0.5)": moments.cross_moment("tanh", "sign", 1, 1, 0.5),
        "kappa1(erf, r=1)": moments.kappa1("erf", 1.0),
        "second_moment(erf, r=1)": moments.second_moment("erf", 1.0),
    }
    for name, value in got.items():
        mean, sigma = KAPPA_GOLDEN[name]
        assert abs(value - mean) <= 3 * sigma, name


def test_negative_r_rejected():
    with pytest.raises(ValueError):
        moments.kappa1("tanh", -0.1)
    with pytest.raises(ValueError):
        moments.second_moment("tanh", -1)


def test_large_r_uses_fallback():
    assert 0 < moments.kappa1("tanh", 100.0) < 0.1
    assert moments.second_moment("tanh", 100.0) == pytest.approx(0.9205368634305167, abs=1e-10)


def test_cross_moment_special_cases():
    assert moments.cross_moment("tanh", "erf", 1.0, 2.0, 0.0) == pytest.approx(0.0, abs=1e-14)
    for act in ("tanh", "erf", "sign", "centered_relu"):
        r = 0.7
        assert moments.cross_moment(act, act, r, r, r) == pytest.approx(moments.second_moment(act, r), abs=1e-10)
    assert moments.cross_moment("sign", "sign", 1, 4, 1.0) == pytest.approx(2 / math.pi * math.asin(0.5), abs=1e-14)
    assert moments.cross_moment("identity", "identity", 1, 2, 0.3) == 0.3


def test_cross_moment_rejects_non_psd():
    with pytest.raises(ValueError, match="positive semi-definite"):
        moments.cross_moment("tanh", "tanh", 1.0, 1.0, 1.1)


def test_near_perfect_correlation_continuous():
    r = 0.9
    exact = moments.cross_moment("tanh", "tanh", r, r, r)
    near = moments.cross_moment("tanh", "tanh", r, r, r * (1 - 1e-9))
    assert abs(exact - near) <= 1e-8


@settings(max_examples=25, deadline=None)
@given(
    st.sampled_from(["tanh", "erf", "sign", "centered_relu"]),
    st.sampled_from(["tanh", "erf", "sign", "centered_relu"]),
    st.floats(0.05, 4.0),
    st.floats(0.05, 4.0),
    st.floats(-0.95, 0.95),
)
def test_cross_moment_swap_symmetry(a, b, ra, rb, rho):
    rc = rho * math.sqrt(ra * rb)
    assert moments.cross_moment(a, b, ra, rb, rc) == pytest.approx(moments.cross_moment(b, a, rb, ra, rc), abs=1e-10)


@settings(max_examples=25, deadline=None)
@given(st.sampled_from(["tanh", "erf", "sign", "centered_relu", "identity"]), st.floats(0.01, 20.0))
def test_kappa_star_non_negative(act, r):
    layer = moments.kappa_layer(act, r)
    assert layer.kappa_star_sq >= 0
    assert layer.r == r


def test_cross_kappa_is_signed():
    ck = moments.cross_kappa("tanh", "sign", 1.0, 1.0, -0.5)
    assert ck.cross_sq == pytest.approx(ck.cross_moment + 0.5 * ck.kappa1_a * ck.kappa1_b)
    assert ck.cross_moment < 0
