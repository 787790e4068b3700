import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st

from magdirac.fields import FieldSpec, GaugeField
from magdirac.lattice import LatticeSpec, OperatorMatrix, build_H0_3d, sawtooth
from magdirac.lap import (
    FloorViolation, ShiftedSolver, check_floor, classify_scan, gap_eigenvalues, lap_scan, refine_eigenpair,
    resolvent_apply, weighted_norm, weighted_vector,
)
from magdirac.potentials import Cutoff, PotentialSpec, build_perturbed_H
from magdirac.spectra import SolverError, eig_window

G = GaugeField(FieldSpec.constant(1.0))


@pytest.fixture(scope="module")
def ring():
    lat = LatticeSpec.magnetic_torus(6, 1, 1.0, n3=64, L3=32.0)
    return lat, build_H0_3d(lat, G, 1.0, 0.5, assemble=False)


@pytest.mark.parametrize("s", [0.6, 1.0, 3.0])
def test_gaussian_vector_normalized(ring, s):
    lat, H0 = ring
    assert np.linalg.norm(weighted_vector(lat, s, "gaussian_x3", "gaussian", H0)) == pytest.approx(1.0, abs=1e-12)


def test_polynomial_weighted_norm(ring):
    lat, H0 = ring
    psi = weighted_vector(lat, 1.0, "polynomial_x3", "gaussian", H0)
    x3 = sawtooth(lat.n3, lat.extents[2])
    f = (1 + x3 ** 2) ** -1.0
    oracle = np.sqrt(np.sum((1 + x3 ** 2) * f ** 2) / np.sum(f ** 2))
    assert np.isfinite(weighted_norm(lat, psi, 1.0))
    assert weighted_norm(lat, psi, 1.0) == pytest.approx(oracle, rel=1e-12)


def test_orthogonal_modes(ring):
    lat, H0 = ring
    a = weighted_vector(lat, 1.0, "gaussian_x3", 0, H0)
    b = weighted_vector(lat, 1.0, "gaussian_x3", 1, H0)
    assert abs(np.vdot(a, b)) <= 1e-12


def test_weight_exponent_guard(ring):
    lat, H0 = ring
    with pytest.raises(ValueError):
        weighted_vector(lat, 0.5)


def test_diagonal_resolvent():
    H = OperatorMatrix(np.diag([1.0, 2.0]).astype(complex), True)
    x = resolvent_apply(H, 1j, np.array([1.0, 0.0]))
    assert np.allclose(x, [1 / (1 - 1j), 0], atol=1e-15)


def test_conjugate_symmetry_real_operator(rng):
    X = rng.normal(size=(40, 40))
    H = OperatorMatrix((X + X.T).astype(complex), True)
    psi = rng.normal(size=40)
    z = 0.3 + 0.7j
    assert np.allclose(resolvent_apply(H, np.conj(z), psi), np.conj(resolvent_apply(H, z, psi)), atol=1e-10)


def test_conjugate_symmetry_of_expectation(ring, rng):
    lat, H0 = ring
    psi = rng.normal(size=H0.dimension)
    z = 1.3 + 0.05j
    a = np.vdot(psi, resolvent_apply(H0, z, psi))
    b = np.vdot(psi, resolvent_apply(H0, np.conj(z), psi))
    assert abs(a - np.conj(b)) <= 1e-10 * abs(a)


@settings(max_examples=25, deadline=None)
@given(st.floats(-3, 3), st.floats(1e-3, 2.0), st.integers(0, 2 ** 31 - 1))
def test_imaginary_part_sign(lam, eps, seed):
    r = np.random.default_rng(seed)
    X = r.normal(size=(30, 30)) + 1j * r.normal(size=(30, 30))
    H = OperatorMatrix(0.5 * (X + X.conj().T), True)
    psi = r.normal(size=30) + 1j * r.normal(size=30)
    assert np.vdot(psi, resolvent_apply(H, lam + 1j * eps, psi)).imag >= 0
    assert np.vdot(psi, resolvent_apply(H, lam - 1j * eps, psi)).imag <= 0


def test_real_z_rejected():
    H = OperatorMatrix(np.eye(2, dtype=complex), True)
    with pytest.raises(SolverError):
        resolvent_apply(H, 0.5, np.ones(2))


def _continuum(n=20001, isolated=None):
    d = np.linspace(-10, 10, n)
    if isolated is not None:
        d[n // 2] = isolated
    return OperatorMatrix(sp.diags(d.astype(complex), format="csr"), True), d


def test_scan_far_below_spectrum():
    H, d = _continuum(8001)
    psi = np.exp(-d ** 2)
    psi /= np.linalg.norm(psi)
    r = lap_scan(H, -11.0, psi, 0.2, 6)
    assert r.verdict == "convergent"
    assert abs(r.extrapolated_limit.imag) <= 1e-3
    assert r.sign_invariant and max(r.solver_residuals) <= 1e-8


def test_scan_in_continuum_converges():
    H, d = _continuum()
    psi = np.exp(-0.5 * d ** 2)
    psi /= np.linalg.norm(psi)
    r = lap_scan(H, 0.37, psi, 0.2, 6)
    assert r.verdict == "convergent"
    assert r.extrapolated_limit.imag > 0


def test_scan_at_isolated_eigenvalue_diverges():
    d = np.concatenate([np.linspace(-10, -2, 4000), [0.5], np.linspace(2, 10, 4000)])
    H = OperatorMatrix(sp.diags(d.astype(complex), format="csr"), True)
    psi = np.exp(-0.5 * d ** 2)
    psi /= np.linalg.norm(psi)
    r = lap_scan(H, 0.5, psi, 0.2, 6)
    assert r.verdict == "divergent"
    v = np.abs(r.values)
    assert v[-1] / v[-2] == pytest.approx(2.0, rel=1e-2)


def test_lower_sign_mirrors(rng):
    H, d = _continuum(8001)
    psi = np.exp(-0.5 * d ** 2) + 0j
    up = lap_scan(H, 0.4, psi, 0.2, 5, "upper")
    lo = lap_scan(H, 0.4, psi, 0.2, 5, "lower")
    assert np.allclose(np.conj(up.values), lo.values, atol=1e-12)
    assert lo.sign_invariant


def test_floor_violation():
    H, _ = _continuum(201)   # spacing 0.1
    with pytest.raises(FloorViolation):
        check_floor(H, 0.0, 0.2)
    assert check_floor(H, 0.0, 5.0) == pytest.approx(0.1, rel=0.05)


def test_classifier():
    eps = 0.2 * 0.5 ** np.arange(6)
    assert classify_scan(1 + 1j + 0.3 * eps) == "convergent"
    assert classify_scan(1j / eps) == "divergent"
    assert classify_scan(np.array([1, 2, 1, 2, 1, 2.0])) == "inconclusive"


def _coulomb(n3=32):
    lat = LatticeSpec.magnetic_torus(8, 2, 1.0, n3=n3, L3=n3 / 4)
    H0 = build_H0_3d(lat, G, 1.0, 0.5, assemble=False)
    return lat, H0, build_perturbed_H(H0, PotentialSpec.coulomb(0.5, cutoff=Cutoff(0.8, 1.5)), lat)


def test_woodbury_matches_dense(rng):
    lat, H0, H = _coulomb(8)
    z = 0.9 + 0.01j
    b = rng.normal(size=H.dimension) + 1j * rng.normal(size=H.dimension)
    s = ShiftedSolver(H, z)
    assert s.mode == "woodbury"
    x = s(b)
    ref = np.linalg.solve(H.toarray() - z * np.eye(H.dimension), b)
    assert np.allclose(x, ref, atol=1e-10 * np.linalg.norm(ref))


def test_gap_eigenvalues_callable_and_refine():
    def level(k):
        return _coulomb(16 * 2 ** k)[2]

    table = gap_eigenvalues(level, (-1.0, 1.0), refinements=1)
    assert table and all(e.stable for e in table)
    lat, H0, H = _coulomb(64)
    lam, v, res = refine_eigenpair(H, table[0].value, iterations=10)
    assert res <= 1e-8
    direct = eig_window(H, (-1.0, 1.0)).eigenvalues
    assert np.min(np.abs(direct - lam)) <= 1e-9
