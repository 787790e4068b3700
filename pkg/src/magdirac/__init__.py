"""Lattice toolkit for three-dimensional Dirac operators in magnetic fields.

Spectra of the transverse operator, fiber structure along the field axis,
Mourre-type commutator checks, Coulomb perturbations and limiting-absorption
probes.
"""

__version__ = "0.1.0"
