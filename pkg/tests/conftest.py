import numpy as np
import pytest

from magdirac.fields import FieldSpec, GaugeField
from magdirac.lattice import LatticeSpec


@pytest.fixture
def unit_gauge():
    return GaugeField(FieldSpec.constant(1.0))


@pytest.fixture
def free_gauge():
    return GaugeField(FieldSpec.constant(0.0))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def torus(n, flux, n3=0, L3=0.0, B0=1.0):
    return LatticeSpec.magnetic_torus(n, flux, B0, n3=n3, L3=L3)
