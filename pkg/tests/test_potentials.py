import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from magdirac.fields import FieldSpec, GaugeField
from magdirac.lattice import LatticeSpec, build_H0_3d
from magdirac.lap import gap_eigenvalues
from magdirac.potentials import (
    Cutoff, HypothesisViolation, PotentialError, PotentialSpec, ProfileTerm, build_perturbed_H, classify_decay,
    coulomb_bound_verify, lattice_points3, potential_from_record, regular_part, resolvent_localization_decay,
    sample_potential,
)
from magdirac.spectra import eig_window

G = GaugeField(FieldSpec.constant(1.0))
RADII = [1, 2, 4, 8, 16, 32, 64]


def test_coulomb_sample():
    spec = PotentialSpec.coulomb(0.5, cutoff=Cutoff(3.0, 4.0))
    V = sample_potential(spec, (0.0, 0.0, 2.0))
    assert np.allclose(V, -0.25 * np.eye(4), atol=1e-15)


def test_zero_outside_cutoff():
    spec = PotentialSpec.coulomb(0.5, cutoff=Cutoff(0.5, 1.0))
    assert np.array_equal(sample_potential(spec, (0.0, 3.0, 0.0)), np.zeros((4, 4)))


def test_yukawa_regular_part():
    spec = PotentialSpec(regular_terms=(ProfileTerm("yukawa"),))
    assert np.allclose(regular_part(spec, (0.6, 0.0, 0.8)), math.exp(-1) * np.eye(4), atol=1e-15)


def test_coupling_hypothesis():
    with pytest.raises(HypothesisViolation):
        PotentialSpec.coulomb(1.05)
    with pytest.raises(PotentialError):
        sample_potential(PotentialSpec.coulomb(0.5), (0.0, 0.0, 0.0))


def test_short_range_profile():
    rep = classify_decay(PotentialSpec(regular_terms=(ProfileTerm("x3_power", power=2.0),)), RADII)
    assert rep.verdicts["short_range"] and rep.verdicts["small_at_infinity"]


def test_long_range_profile():
    rep = classify_decay(PotentialSpec(regular_terms=(ProfileTerm("x3_power", power=0.5),)), RADII)
    assert not rep.verdicts["short_range"]
    assert rep.verdicts["long_range"]
    assert rep.long_range_exponent == pytest.approx(-1.5, abs=0.1)


def test_constant_not_small():
    rep = classify_decay(PotentialSpec(regular_terms=(ProfileTerm("constant", amplitude=0.3),)), RADII)
    assert not rep.verdicts["small_at_infinity"]
    assert not rep.verdicts["short_range"]


def test_sup_norms_monotone():
    rep = classify_decay(PotentialSpec(regular_terms=(ProfileTerm("gaussian", width=2.0),)), RADII)
    s = [v for _, v in rep.shell_sup_norms]
    assert all(b <= a for a, b in zip(s, s[1:]))


def test_scalar_coulomb_bound_tight():
    pts = np.random.default_rng(0).uniform(-3, 3, size=(200, 3))
    assert coulomb_bound_verify(PotentialSpec.coulomb(0.7, cutoff=Cutoff(5.0, 6.0)), pts) <= 0.0


def test_unit_norm_matrix_bound():
    D = np.diag([1.0, -1.0, 0.5, -0.25]).astype(complex)
    spec = PotentialSpec(coulomb_centers=((0.0, 0.0, 0.0),), nu=0.6, coulomb_matrix=tuple(map(tuple, D)))
    pts = np.random.default_rng(1).uniform(-3, 3, size=(100, 3))
    assert coulomb_bound_verify(spec, pts) <= 1e-15


def test_adversarial_coupling_detected():
    spec = PotentialSpec(coulomb_centers=((0.0, 0.0, 0.0),), nu=0.5,
                         coulomb_matrix=tuple(map(tuple, -1.2 * np.eye(4))), cutoff=Cutoff(5.0, 6.0))
    pts = np.random.default_rng(2).uniform(-2, 2, size=(50, 3))
    assert coulomb_bound_verify(spec, pts) > 0
    lat = LatticeSpec.magnetic_torus(4, 1, 1.0, n3=4, L3=4.0)
    with pytest.raises(HypothesisViolation):
        build_perturbed_H(build_H0_3d(lat, G, 1.0, 0.5), spec, lat)


@settings(max_examples=25, deadline=None)
@given(st.floats(0, 0.99), st.lists(st.tuples(*[st.floats(-3, 3)] * 3), min_size=1, max_size=3))
def test_coulomb_bound_property(nu, centers):
    spec = PotentialSpec.coulomb(nu, centers=centers, cutoff=Cutoff(1.0, 2.0))
    pts = np.random.default_rng(3).uniform(-4, 4, size=(60, 3))
    pts = pts[[min(np.linalg.norm(p - np.array(c)) for c in centers) > 1e-3 for p in pts]]
    if pts.size:
        assert coulomb_bound_verify(spec, pts) <= 1e-12


def test_record_roundtrip():
    spec = PotentialSpec.coulomb(0.4, centers=[(0.1, 0.2, 0.3)], cutoff=Cutoff(0.5, 1.2),
                                 regular_terms=(ProfileTerm("gaussian", amplitude=0.2, width=1.5),))
    back = potential_from_record(spec.to_record())
    x = np.array([[0.3, -0.4, 0.9], [1.0, 1.0, 1.0]])
    assert np.allclose(sample_potential(back, x), sample_potential(spec, x), atol=0)


def _small(n=4, n3=4, L3=4.0, assemble=True):
    lat = LatticeSpec.magnetic_torus(n, 1, 1.0, n3=n3, L3=L3)
    return lat, build_H0_3d(lat, G, 1.0, 0.5, assemble=assemble)


def test_zero_potential_is_free():
    lat, H0 = _small()
    H = build_perturbed_H(H0, PotentialSpec(), lat)
    assert (H.sparse() - H0.sparse()).nnz == 0 or abs(H.sparse() - H0.sparse()).max() == 0


def test_weyl_bound():
    lat, H0 = _small()
    spec = PotentialSpec(regular_terms=(ProfileTerm("yukawa", amplitude=0.3, range=1.5),))
    H = build_perturbed_H(H0, spec, lat)
    w = H.max_sampled_norm
    a = np.linalg.eigvalsh(H0.toarray())
    b = np.linalg.eigvalsh(H.toarray())
    assert 0 < w <= 0.3 + 1e-12
    assert np.max(np.abs(a - b)) <= w + 1e-10


def test_centre_on_site_rejected():
    lat, H0 = _small()
    site = tuple(lattice_points3(lat)[5])
    with pytest.raises(PotentialError):
        build_perturbed_H(H0, PotentialSpec.coulomb(0.3, centers=[site]), lat)


def _coulomb_model(sign=-1.0, nu=0.5):
    lat = LatticeSpec.magnetic_torus(8, 2, 1.0, n3=32, L3=8.0)
    H0 = build_H0_3d(lat, G, 1.0, 0.5, assemble=False)
    spec = PotentialSpec.coulomb(nu, cutoff=Cutoff(0.8, 1.5)).with_sign(sign)
    return H0, build_perturbed_H(H0, spec, lat)


def test_attractive_coulomb_binds_and_mirrors():
    H0, Ha = _coulomb_model(-1.0)
    _, Hr = _coulomb_model(+1.0)
    mu = H0.fiber.mu0()
    a = eig_window(Ha, (-mu, mu)).eigenvalues
    r = eig_window(Hr, (-mu, mu)).eigenvalues
    assert a.size >= 1 and np.all((a > 0) & (a < 1.0 + 0.2))
    assert np.allclose(np.sort(-r), np.sort(a), atol=1e-8)


def test_free_operator_has_empty_gap_table():
    Hs = []
    for n3 in (16, 32):
        lat = LatticeSpec.magnetic_torus(6, 1, 1.0, n3=n3, L3=n3 / 4)
        Hs.append(build_H0_3d(lat, G, 1.0, 0.5, assemble=False))
    mu = min(H.fiber.mu0() for H in Hs)
    assert gap_eigenvalues(Hs, (-mu, mu)) == []


def test_localization_trivial_cases():
    lat, H0 = _small(n=4, n3=6, L3=6.0)
    tab = resolvent_localization_decay(H0, H0, 1j, [1, 2, 3, 4], lat)
    assert np.all(tab.norms == 0)
    H = build_perturbed_H(H0, PotentialSpec.coulomb(0.5, cutoff=Cutoff(0.8, 1.5)), lat)
    far = resolvent_localization_decay(H0, H, 1j, [1.0, 2.0, 100.0], lat)
    assert far.norms[-1] == 0.0 and far.norms[0] > 0
