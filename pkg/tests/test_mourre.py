import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from magdirac.fields import FieldSpec, GaugeField
from magdirac.lattice import LatticeSpec, build_H0_3d, build_T_R
from magdirac.mourre import (
    DenseModel, SmoothStepF, measured_rho, mourre_lower_bound, rho_T_vs_R_check, smooth_step_eval,
    verify_mourre_inequality, window_lower_bound,
)
from magdirac.spectra import internal_spectrum, symmetrize

F = SmoothStepF()
S3 = math.sqrt(3)


def test_step_values():
    assert smooth_step_eval(F, -1.0) == 0.0
    assert smooth_step_eval(F, 2.0) == 1.0
    assert smooth_step_eval(F, 0.5) == pytest.approx(0.5, abs=1e-13)


@settings(max_examples=60, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3))
def test_step_monotone_and_bounded(a, b):
    fa, fb = smooth_step_eval(F, a), smooth_step_eval(F, b)
    assert 0.0 <= fa <= 1.0
    if a <= b:
        assert fa <= fb + 1e-15


@settings(max_examples=40, deadline=None)
@given(st.floats(0, 1))
def test_step_point_symmetry(x):
    assert smooth_step_eval(F, x) + smooth_step_eval(F, 1 - x) == pytest.approx(1.0, abs=1e-12)


def test_step_derivative_matches_difference():
    x = np.linspace(0.05, 0.95, 7)
    h = 1e-5
    fd = (smooth_step_eval(F, x + h) - smooth_step_eval(F, x - h)) / (2 * h)
    assert np.allclose(smooth_step_eval(F, x, derivative=True), fd, atol=1e-7)


SYM = symmetrize(np.array([1.0, S3, math.sqrt(5)]), 1e-9)


def test_bound_below_mu0_is_infinite():
    assert mourre_lower_bound(0.5, SYM, F) == math.inf


def test_bound_on_threshold_is_zero():
    assert mourre_lower_bound(S3, SYM, F) == 0.0


def test_bound_formula_value():
    assert mourre_lower_bound(1.5, SYM, F) == pytest.approx(math.sqrt(1.25) / 1.5, abs=1e-12)


def test_bound_mirror():
    assert mourre_lower_bound(-1.5, SYM, F) == mourre_lower_bound(1.5, SYM, F)


@pytest.mark.parametrize("lam", [-2.0, 0.0, 0.7, 3.0])
def test_empty_sigma_sym_bound_is_infinite(lam):
    empty = np.array([], dtype=float)
    assert mourre_lower_bound(lam, empty, F) == math.inf
    assert window_lower_bound(lam if lam else 0.1, 0.05, empty, F) == math.inf


@settings(max_examples=40, deadline=None)
@given(st.floats(1.01, 2.5), st.floats(1e-3, 0.2))
def test_window_bound_is_worst_case(lam, eps):
    wb = window_lower_bound(lam, eps, SYM, F)
    for x in np.linspace(max(lam - eps, 0), lam + eps, 41):
        assert wb <= mourre_lower_bound(x, SYM, F) + 1e-12


@pytest.fixture(scope="module")
def small_model():
    g = GaugeField(FieldSpec.constant(1.0))
    lat = LatticeSpec.magnetic_torus(6, 1, 1.0, n3=12, L3=6.0)
    H0 = build_H0_3d(lat, g, 1.0, 0.5)
    T, R = build_T_R(lat, H0, F, method="dense")
    _, sym = internal_spectrum(lat, g, 1.0, 0.5)
    return lat, H0, T, R, sym, DenseModel(H0)


def test_window_below_mu0_is_empty(small_model):
    _, H0, T, _, sym, model = small_model
    rep = verify_mourre_inequality(H0, T, (0.3 * sym.mu0, 0.1 * sym.mu0), sym, F, model)
    assert rep.window_dim == 0 and rep.measured_inf == math.inf and rep.satisfied


def test_threshold_window_positive(small_model):
    _, H0, T, R, sym, model = small_model
    mu = float(sym.values[sym.values > 0][1])
    rep = verify_mourre_inequality(H0, R, (mu, 0.02), sym, F, model)
    assert rep.bound_formula == 0.0
    assert rep.measured_inf >= -1e-10


# occupied windows of the 6x6x12 model (levels near 1.520, 2.178/2.205, 2.367/2.397)
WINDOWS = [(1.52, 0.03), (2.19, 0.03), (2.38, 0.03)]


@pytest.mark.parametrize("window", WINDOWS)
def test_T_equals_R_on_windows(small_model, window):
    _, H0, T, R, _, model = small_model
    lam, eps = window
    assert model.window_basis(lam, eps).shape[1] > 0
    assert rho_T_vs_R_check(H0, T, R, window, model) <= 1e-10
    # mirrored side: -T on the negative window
    assert rho_T_vs_R_check(H0, -T, R, (-lam, eps), model) <= 1e-10


def test_zero_F_both_sides_vanish(small_model):
    lat, H0, _, _, _, model = small_model
    zero = lambda x: np.zeros_like(np.asarray(x, dtype=float))
    T0, R0 = build_T_R(lat, H0, zero, method="dense")
    for S in (T0, R0):
        P = model.projected(S, 2.19, 0.03)
        assert P.size and np.abs(P).max() == 0


def test_R_rho_nonnegative_everywhere(small_model):
    _, _, _, R, _, model = small_model
    for lam in np.linspace(1.1, 2.4, 9):
        val, _ = measured_rho(model, R, lam, 0.03)
        assert val >= -1e-10


def test_odd_extension_satisfies_bound(small_model):
    # with F extended oddly T is nonnegative on both fibers of each +-xi pair
    lat, H0, _, _, sym, model = small_model
    Fo = SmoothStepF("odd_bump_integral")
    To, _ = build_T_R(lat, H0, Fo, method="dense")
    for window in WINDOWS:
        rep = verify_mourre_inequality(H0, To, window, sym, F, model)
        assert rep.window_dim > 0 and rep.satisfied
