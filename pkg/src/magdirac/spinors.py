"""Dirac-Pauli and Pauli matrices in the standard representation.

Also splits the 4-component zero-momentum fiber operator into its two
2-component blocks (the internal operator and its partner).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

SIGMA0 = np.eye(2, dtype=complex)
SIGMA1 = np.array([[0, 1], [1, 0]], dtype=complex)
SIGMA2 = np.array([[0, -1j], [1j, 0]], dtype=complex)
SIGMA3 = np.array([[1, 0], [0, -1]], dtype=complex)

# spinor index order that brings the standard representation into the
# block form K (+) Ktilde: components (1,4) then (2,3), zero based
BLOCK_PERMUTATION = (0, 3, 1, 2)


@dataclass(frozen=True)
class DiracMatrixSet:
    alpha1: np.ndarray
    alpha2: np.ndarray
    alpha3: np.ndarray
    beta: np.ndarray
    sigma1: np.ndarray
    sigma2: np.ndarray
    sigma3: np.ndarray
    representation_name: str = "dirac"

    @property
    def alphas(self):
        return (self.alpha1, self.alpha2, self.alpha3)

    @property
    def sigmas(self):
        return (self.sigma1, self.sigma2, self.sigma3)

    def clifford_residual(self) -> float:
        """max |{a_i, a_j} - 2 delta_ij I| over i, j in {0..3}, a_0 = beta."""
        mats = (self.beta, *self.alphas)
        eye = np.eye(4)
        worst = 0.0
        for i, a in enumerate(mats):
            for j, b in enumerate(mats):
                target = 2.0 * eye if i == j else 0.0 * eye
                worst = max(worst, float(np.max(np.abs(a @ b + b @ a - target))))
        return worst

    def pauli_residual(self) -> float:
        """max residual of sigma_i sigma_j = delta_ij I + i eps_ijk sigma_k."""
        s = self.sigmas
        worst = 0.0
        for i in range(3):
            for j in range(3):
                target = SIGMA0 * (i == j)
                for k in range(3):
                    eps = _levi_civita(i, j, k)
                    if eps:
                        target = target + 1j * eps * s[k]
                worst = max(worst, float(np.max(np.abs(s[i] @ s[j] - target))))
        return worst


def _levi_civita(i: int, j: int, k: int) -> int:
    return int((i - j) * (j - k) * (k - i) / 2)


def dirac_matrices() -> DiracMatrixSet:
    """Standard (Dirac) representation: alpha_j = [[0, s_j], [s_j, 0]], beta = diag(I, -I)."""
    zero = np.zeros((2, 2), dtype=complex)

    def off(s):
        return np.block([[zero, s], [s, zero]])

    beta = np.block([[SIGMA0, zero], [zero, -SIGMA0]])
    return DiracMatrixSet(
        alpha1=off(SIGMA1),
        alpha2=off(SIGMA2),
        alpha3=off(SIGMA3),
        beta=beta,
        sigma1=SIGMA1.copy(),
        sigma2=SIGMA2.copy(),
        sigma3=SIGMA3.copy(),
    )


def spinor_permutation(n_sites: int, perm=BLOCK_PERMUTATION) -> np.ndarray:
    """Index map for a spinor-major layout (component * n_sites + site).

    ``out[new] = old`` so that ``M[np.ix_(p, p)]`` reorders components.
    """
    return np.concatenate([np.arange(n_sites) + c * n_sites for c in perm])


def block_decompose_internal(H00):
    """Split H_0(0) into K (the internal operator) and Ktilde.

    ``H00`` is an :class:`~magdirac.lattice.OperatorMatrix` with 4 spinor
    components and zero fiber momentum. Returns ``(K, Ktilde, perm)``.
    """
    from .lattice import OperatorMatrix

    meta = H00.block_meta
    if meta.n_spinor != 4 or meta.n3 != 1:
        raise ValueError("block_decompose_internal expects a 4-component transverse operator")
    ns = meta.n_sites
    perm = spinor_permutation(ns)
    M = sp.csr_matrix(H00.entries)[perm][:, perm].tocsr()
    # the off-diagonal blocks between (1,4) and (2,3) must vanish
    coupling = M[: 2 * ns, 2 * ns :]
    if coupling.nnz and np.max(np.abs(coupling.data)) > 0:
        raise ValueError("operator couples the (1,4) and (2,3) spinor pairs; not in standard form")
    sub_meta = meta.with_spinor(2)
    K = OperatorMatrix(M[: 2 * ns, : 2 * ns].tocsr(), hermitian=H00.hermitian, block_meta=sub_meta)
    Kt = OperatorMatrix(M[2 * ns :, 2 * ns :].tocsr(), hermitian=H00.hermitian, block_meta=sub_meta)
    return K, Kt, perm


def reassemble(K, Ktilde, perm) -> sp.csr_matrix:
    """Inverse of :func:`block_decompose_internal` on the matrix entries."""
    M = sp.block_diag([K.entries, Ktilde.entries], format="csr")
    inv = np.empty_like(perm)
    inv[perm] = np.arange(perm.size)
    return M[inv][:, inv].tocsr()


def multiset_distance(a, b) -> float:
    """Max abs difference of sorted values; inf when the sizes differ."""
    a = np.sort(np.asarray(a, dtype=float).ravel())
    b = np.sort(np.asarray(b, dtype=float).ravel())
    if a.size != b.size:
        return float("inf")
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - b)))
