"""Lattice discretization of the magnetic Dirac operators.

Index layout everywhere: ``((component * n_sites) + site) * n3 + k3`` with
``site = i1 * N2 + i2``. The x3 axis is periodic and differentiated
spectrally, so the 3-D free operator factorizes exactly into fibers.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable, Optional, Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .fields import FieldSpec, GaugeField
from .spinors import dirac_matrices, SIGMA1, SIGMA2, SIGMA3

BOUNDARIES = ("magnetic_periodic", "dirichlet")
DEFAULT_NNZ_BUDGET = 40_000_000
DENSE_CAP = 6000


class LatticeError(ValueError):
    pass


class FluxQuantizationError(LatticeError):
    pass


class SpectralGapTooSmall(LatticeError):
    pass


@dataclass(frozen=True)
class LatticeSpec:
    extents: tuple
    points: tuple
    boundary: str = "dirichlet"
    flux_quanta: int = 0
    spinor_components: int = 4

    def __post_init__(self):
        object.__setattr__(self, "extents", tuple(float(v) for v in self.extents))
        object.__setattr__(self, "points", tuple(int(v) for v in self.points))
        if len(self.extents) != len(self.points) or len(self.points) not in (2, 3):
            raise LatticeError("lattice must be 2-D or 3-D with matching extents/points")
        if any(n < 4 for n in self.points):
            raise LatticeError("every axis needs at least 4 points")
        if any(L <= 0 for L in self.extents):
            raise LatticeError("extents must be positive")
        if self.boundary not in BOUNDARIES:
            raise LatticeError(f"unknown boundary {self.boundary!r}")
        if self.spinor_components not in (2, 4):
            raise LatticeError("spinor_components must be 2 or 4")

    @classmethod
    def magnetic_torus(cls, n: int, flux_quanta: int, B0: float, n3: int = 0, L3: float = 0.0,
                       spinor_components: int = 4) -> "LatticeSpec":
        """Square n x n torus sized so that B0 * L^2 = 2 pi * flux_quanta."""
        L = math.sqrt(2 * math.pi * flux_quanta / B0)
        if n3:
            return cls((L, L, L3), (n, n, n3), "magnetic_periodic", flux_quanta, spinor_components)
        return cls((L, L), (n, n), "magnetic_periodic", flux_quanta, spinor_components)

    @property
    def dims(self) -> int:
        return len(self.points)

    @property
    def spacing(self) -> tuple:
        return tuple(L / n for L, n in zip(self.extents, self.points))

    @property
    def n_sites(self) -> int:
        return self.points[0] * self.points[1]

    @property
    def n3(self) -> int:
        return self.points[2] if self.dims == 3 else 1

    @property
    def transverse(self) -> "LatticeSpec":
        if self.dims == 2:
            return self
        return replace(self, extents=self.extents[:2], points=self.points[:2])

    def with_points(self, points) -> "LatticeSpec":
        return replace(self, points=tuple(points))

    def coords(self, axis: int) -> np.ndarray:
        """Cell-centred coordinates; the origin sits at a cell vertex."""
        L, n = self.extents[axis], self.points[axis]
        h = L / n
        return -0.5 * L + (np.arange(n) + 0.5) * h

    def transverse_points(self) -> np.ndarray:
        x1, x2 = np.meshgrid(self.coords(0), self.coords(1), indexing="ij")
        return np.stack([x1.ravel(), x2.ravel()], axis=-1)

    def check_flux(self, spec: FieldSpec) -> None:
        if self.boundary != "magnetic_periodic":
            return
        if not spec.is_constant:
            raise FluxQuantizationError("magnetic_periodic boundary requires a constant field")
        flux = spec.strength * self.extents[0] * self.extents[1]
        target = 2 * math.pi * self.flux_quanta
        if abs(flux - target) > 1e-9 * max(1.0, abs(target)):
            raise FluxQuantizationError(
                f"B0*L1*L2 = {flux:.12g} is not 2*pi*{self.flux_quanta}"
            )

    def to_record(self) -> dict:
        return {
            "extents": list(self.extents),
            "points": list(self.points),
            "boundary": self.boundary,
            "flux_quanta": self.flux_quanta,
            "spinor_components": self.spinor_components,
        }


@dataclass(frozen=True)
class BlockMeta:
    n_spinor: int
    shape: tuple
    n3: int = 1

    @property
    def n_sites(self) -> int:
        return int(np.prod(self.shape))

    @property
    def transverse_dim(self) -> int:
        return self.n_spinor * self.n_sites

    @property
    def dimension(self) -> int:
        return self.transverse_dim * self.n3

    def with_spinor(self, n: int) -> "BlockMeta":
        return replace(self, n_spinor=n)


class OperatorMatrix:
    """Lattice operator: a sparse (or dense) matrix plus its spinor layout.

    ``fiber`` carries the x3-fiber factorization when the operator is the
    free 3-D Hamiltonian; ``potential`` the site-diagonal perturbation.
    Both enable fast matrix-free paths.
    """

    def __init__(self, entries, hermitian: bool = True, block_meta: Optional[BlockMeta] = None,
                 fiber: "Optional[FiberStructure]" = None, potential=None, name: str = "",
                 check: bool = True):
        self._entries = entries
        self.hermitian = hermitian
        self.fiber = fiber
        self.potential = potential
        self.name = name
        if entries is None and fiber is None:
            raise LatticeError("matrix-free operator needs a fiber structure")
        if block_meta is None:
            n = self.dimension_from_entries()
            block_meta = BlockMeta(1, (n,), 1)
        self.block_meta = block_meta
        if hermitian and check and entries is not None:
            res = self.hermiticity_residual()
            if res > 1e-14 * max(1.0, self.norm_bound()):
                raise LatticeError(f"operator {name!r} flagged Hermitian has residual {res:.3e}")

    def dimension_from_entries(self) -> int:
        return self._entries.shape[0]

    @property
    def dimension(self) -> int:
        return self.block_meta.dimension if self._entries is None else self._entries.shape[0]

    @property
    def shape(self):
        return (self.dimension, self.dimension)

    @property
    def is_matrix_free(self) -> bool:
        return self._entries is None

    @property
    def entries(self):
        if self._entries is None:
            self._entries = self._assemble()
        return self._entries

    def _assemble(self):
        M = self.fiber.assemble()
        if self.potential is not None:
            M = M + self.potential
        return M.tocsr()

    def toarray(self) -> np.ndarray:
        e = self.entries
        return e.toarray() if sp.issparse(e) else np.asarray(e)

    def sparse(self) -> sp.csr_matrix:
        e = self.entries
        return e.tocsr() if sp.issparse(e) else sp.csr_matrix(e)

    def matvec(self, x: np.ndarray) -> np.ndarray:
        if self._entries is not None and self.fiber is None:
            return self._entries @ x
        if self.fiber is not None:
            y = self.fiber.apply(x)
            if self.potential is not None:
                y = y + self.potential @ x
            return y
        return self._entries @ x

    def __matmul__(self, x):
        return self.matvec(x)

    def as_linear_operator(self) -> spla.LinearOperator:
        n = self.dimension

        def mv(v):
            return self.matvec(np.asarray(v).reshape(n, -1)).reshape(v.shape)

        return spla.LinearOperator((n, n), matvec=mv, rmatvec=mv if self.hermitian else None,
                                   matmat=lambda V: self.matvec(V), dtype=complex)

    def hermiticity_residual(self) -> float:
        e = self.entries
        if sp.issparse(e):
            d = (e - e.getH()).tocoo()
            return float(np.max(np.abs(d.data))) if d.nnz else 0.0
        return float(np.max(np.abs(e - e.conj().T))) if e.size else 0.0

    def norm_bound(self) -> float:
        """Max absolute row sum, an upper bound on the spectral norm for Hermitian M."""
        if self._entries is None:
            return self.fiber.norm_bound() + (
                float(abs(self.potential).sum(axis=1).max()) if self.potential is not None else 0.0)
        e = self._entries
        if sp.issparse(e):
            return float(abs(e).sum(axis=1).max()) if e.nnz else 0.0
        return float(np.abs(e).sum(axis=1).max()) if e.size else 0.0

    def __add__(self, other: "OperatorMatrix") -> "OperatorMatrix":
        return OperatorMatrix(self.entries + other.entries, self.hermitian and other.hermitian,
                              self.block_meta)

    def __neg__(self) -> "OperatorMatrix":
        return OperatorMatrix(-self.entries, self.hermitian, self.block_meta, name=f"-{self.name}")


def export_coordinate_list(op: OperatorMatrix, path, header_lines: Sequence[str] = ()) -> None:
    """Write ``dimension nnz`` then ``i j re im`` rows (zero based)."""
    M = op.sparse().tocoo()
    order = np.lexsort((M.col, M.row))
    with open(path, "w", newline="\n") as fh:
        for line in header_lines:
            fh.write(f"# {line}\n")
        fh.write(f"{M.shape[0]} {M.nnz}\n")
        for i, j, v in zip(M.row[order], M.col[order], M.data[order]):
            fh.write(f"{i} {j} {v.real:.17g} {v.imag:.17g}\n")


def read_coordinate_list(path) -> sp.csr_matrix:
    with open(path) as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    n, nnz = map(int, lines[0].split())
    rows = np.loadtxt(lines[1:], ndmin=2) if nnz else np.zeros((0, 4))
    return sp.csr_matrix((rows[:, 2] + 1j * rows[:, 3], (rows[:, 0].astype(int), rows[:, 1].astype(int))),
                         shape=(n, n))


# ---------------------------------------------------------------------------
# transverse plane
# ---------------------------------------------------------------------------

def _seam_gauge(spec: FieldSpec, lattice: LatticeSpec, axis: int, y: np.ndarray) -> np.ndarray:
    """g_j with a(y + L_j e_j) = a(y) + grad g_j(y) for the constant-field transversal gauge."""
    B = spec.strength
    L1, L2 = lattice.extents[:2]
    if axis == 0:
        return 0.5 * B * L1 * y[..., 1]
    return -0.5 * B * L2 * y[..., 0]


def hopping_matrix(lattice: LatticeSpec, gauge: GaugeField, axis: int) -> sp.csr_matrix:
    """S[x, x + h e_j] = exp(-i int_x^{x+h e_j} a . dl) on the transverse lattice."""
    lat = lattice.transverse
    lat.check_flux(gauge.spec)
    N1, N2 = lat.points
    h = lat.spacing[axis]
    pts = lat.transverse_points()
    idx = np.arange(N1 * N2).reshape(N1, N2)
    step = np.zeros(2)
    step[axis] = h
    phase = np.exp(-1j * gauge.line_integral(pts, pts + step))
    src = idx.ravel()
    if axis == 0:
        dst = np.roll(idx, -1, axis=0).ravel()
        seam = (np.arange(N1 * N2) // N2) == N1 - 1
    else:
        dst = np.roll(idx, -1, axis=1).ravel()
        seam = (np.arange(N1 * N2) % N2) == N2 - 1
    if lat.boundary == "dirichlet":
        keep = ~seam
        return sp.csr_matrix((phase[keep], (src[keep], dst[keep])), shape=(N1 * N2,) * 2)
    wrapped = pts[dst]
    phase = phase.copy()
    phase[seam] *= np.exp(1j * _seam_gauge(gauge.spec, lat, axis, wrapped[seam]))
    return sp.csr_matrix((phase, (src, dst)), shape=(N1 * N2,) * 2)


def build_pi(lattice: LatticeSpec, gauge: GaugeField, axis: int) -> OperatorMatrix:
    """Symmetric-difference Pi_j = -i d_j - a_j with Peierls phases; axis is 1 or 2."""
    if lattice.dims < 2:
        raise LatticeError("need a lattice with at least two dimensions")
    if axis not in (1, 2):
        raise LatticeError("axis must be 1 or 2")
    S = hopping_matrix(lattice, gauge, axis - 1)
    h = lattice.spacing[axis - 1]
    Pi = (-0.5j / h) * (S - S.getH())
    meta = BlockMeta(1, lattice.points[:2], 1)
    return OperatorMatrix(Pi.tocsr(), True, meta, name=f"Pi{axis}")


def wilson_term(lattice: LatticeSpec, gauge: GaugeField) -> sp.csr_matrix:
    """W = sum_j (2 - S_j - S_j^dag) / (2 h_j): half the covariant lattice Laplacian times h."""
    n = lattice.n_sites
    W = sp.csr_matrix((n, n), dtype=complex)
    for axis in (0, 1):
        S = hopping_matrix(lattice, gauge, axis)
        h = lattice.spacing[axis]
        W = W + (2 * sp.identity(n, format="csr") - S - S.getH()) / (2 * h)
    return W.tocsr()


def plaquette_phases(lattice: LatticeSpec, gauge: GaugeField) -> np.ndarray:
    """Product of link phases around every elementary plaquette (counter-clockwise)."""
    S1 = hopping_matrix(lattice, gauge, 0).tocsr()
    S2 = hopping_matrix(lattice, gauge, 1).tocsr()
    N1, N2 = lattice.transverse.points
    idx = np.arange(N1 * N2).reshape(N1, N2)
    out = []
    for i in range(N1):
        for j in range(N2):
            if lattice.boundary == "dirichlet" and (i == N1 - 1 or j == N2 - 1):
                continue
            a = idx[i, j]
            b = idx[(i + 1) % N1, j]
            c = idx[(i + 1) % N1, (j + 1) % N2]
            d = idx[i, (j + 1) % N2]
            # a->b->c->d->a; backwards links use conjugates
            out.append(S1[a, b] * S2[b, c] * np.conj(S1[d, c]) * np.conj(S2[a, d]))
    return np.asarray(out)


def build_internal_H(lattice: LatticeSpec, gauge: GaugeField, m: float, wilson_r: float = 1.0,
                     components: Optional[int] = None) -> OperatorMatrix:
    """Transverse Dirac operator with a Wilson mass term.

    2 components: H^0 = s1 Pi1 + s2 Pi2 + s3 (m + r W).
    4 components: H_0(0) = a1 Pi1 + a2 Pi2 + beta (m + r W).
    """
    if m <= 0:
        raise LatticeError("mass must be positive")
    if wilson_r < 0:
        raise LatticeError("wilson_r must be non-negative")
    lat = lattice.transverse
    comps = components or lattice.spinor_components
    Pi1 = build_pi(lat, gauge, 1).entries
    Pi2 = build_pi(lat, gauge, 2).entries
    n = lat.n_sites
    mass = m * sp.identity(n, format="csr") + wilson_r * wilson_term(lat, gauge)
    if comps == 2:
        mats = (SIGMA1, SIGMA2, SIGMA3)
    else:
        D = dirac_matrices()
        mats = (D.alpha1, D.alpha2, D.beta)
    M = sp.kron(mats[0], Pi1) + sp.kron(mats[1], Pi2) + sp.kron(mats[2], mass)
    meta = BlockMeta(comps, lat.points, 1)
    name = "H^0" if comps == 2 else "H_0(0)"
    return OperatorMatrix(M.tocsr(), True, meta, name=name)


def alpha3_transverse(meta: BlockMeta) -> sp.csr_matrix:
    if meta.n_spinor != 4:
        raise LatticeError("alpha3 needs 4 spinor components")
    return sp.kron(dirac_matrices().alpha3, sp.identity(meta.n_sites), format="csr")


def build_fiber_H(H00: OperatorMatrix, xi: float) -> OperatorMatrix:
    """H_0(xi) = H_0(0) + alpha3 xi."""
    if xi == 0:
        return H00
    M = H00.sparse() + xi * alpha3_transverse(H00.block_meta)
    return OperatorMatrix(M.tocsr(), True, H00.block_meta, name=f"H_0({xi:g})")


# ---------------------------------------------------------------------------
# x3 axis
# ---------------------------------------------------------------------------

def fiber_momenta(n3: int, L3: float) -> np.ndarray:
    """Discrete Fourier momenta xi_k = 2 pi k / L3 in FFT order."""
    return 2 * np.pi * np.fft.fftfreq(n3, d=L3 / n3)


def fourier_multiplier(symbol: np.ndarray) -> np.ndarray:
    """Dense matrix of f(P3) on the periodic ring, f given on the FFT momenta."""
    n = symbol.size
    return np.fft.ifft(symbol[:, None] * np.fft.fft(np.eye(n), axis=0), axis=0)


def sawtooth(n3: int, L3: float) -> np.ndarray:
    return -0.5 * L3 + (np.arange(n3) + 0.5) * (L3 / n3)


def apply_alpha3(X: np.ndarray, n_sites: int) -> np.ndarray:
    """alpha3 on arrays whose first axis is (component, site)."""
    Y = X.reshape((4, n_sites) + X.shape[1:])
    out = np.empty_like(Y)
    out[0] = Y[2]
    out[1] = -Y[3]
    out[2] = Y[0]
    out[3] = -Y[1]
    return out.reshape(X.shape)


class FiberStructure:
    """H_0 = H_0(0) (x) 1 + alpha3 (x) P3 with P3 diagonal in the discrete Fourier basis."""

    def __init__(self, H00: OperatorMatrix, n3: int, L3: float):
        self.H00 = H00
        self.meta = H00.block_meta
        self.n3 = int(n3)
        self.L3 = float(L3)
        self.xi = fiber_momenta(self.n3, self.L3)
        self._h00 = H00.sparse()
        self._eig = None

    @property
    def nt(self) -> int:
        return self.meta.transverse_dim

    @property
    def block_meta(self) -> BlockMeta:
        return replace(self.meta, n3=self.n3)

    def eig_internal(self):
        if self._eig is None:
            e, U = np.linalg.eigh(self._h00.toarray())
            self._eig = (e, U)
        return self._eig

    def norm_bound(self) -> float:
        return float(abs(self._h00).sum(axis=1).max()) + float(np.max(np.abs(self.xi)))

    def _grid(self, x):
        X = np.asarray(x)
        extra = X.shape[1:] if X.ndim > 1 else ()
        return X.reshape((self.nt, self.n3) + extra), X.shape

    def apply(self, x: np.ndarray) -> np.ndarray:
        X, shape = self._grid(x)
        xi = self.xi.reshape((1, -1) + (1,) * (X.ndim - 2))
        P3X = np.fft.ifft(xi * np.fft.fft(X, axis=1), axis=1)
        Y = (self._h00 @ X.reshape(self.nt, -1)).reshape(X.shape)
        Y = Y + apply_alpha3(P3X, self.meta.n_sites)
        return Y.reshape(shape)

    def fourier_apply(self, symbol: np.ndarray, x: np.ndarray) -> np.ndarray:
        """(1 (x) f(P3)) x for f sampled on the FFT momenta."""
        X, shape = self._grid(x)
        s = symbol.reshape((1, -1) + (1,) * (X.ndim - 2))
        return np.fft.ifft(s * np.fft.fft(X, axis=1), axis=1).reshape(shape)

    def _spectral_solve(self, x, weight: Callable, numerator: bool, z: complex = 0.0):
        """U diag(w(e^2 + xi^2)) U^H per fiber, optionally times (H_0(xi) + z)."""
        e, U = self.eig_internal()
        X, shape = self._grid(x)
        Xh = np.fft.fft(X, axis=1)
        flat = Xh.reshape(self.nt, -1)
        C = (U.conj().T @ flat).reshape(self.nt, self.n3, -1)
        w = weight(e[:, None] ** 2 + self.xi[None, :] ** 2)
        Y = (U @ (C * w[:, :, None]).reshape(self.nt, -1)).reshape(C.shape)
        if numerator:
            xi = self.xi[None, :, None]
            Y = (self._h00 @ Y.reshape(self.nt, -1)).reshape(Y.shape) + apply_alpha3(Y * xi, self.meta.n_sites) + z * Y
        out = np.fft.ifft(Y, axis=1).reshape(X.shape)
        return out.reshape(shape)

    def resolvent(self, z: complex, x: np.ndarray) -> np.ndarray:
        """(H_0 - z)^{-1} x using (H_0(xi) - z)^{-1} = (H_0(xi) + z) / (H_0(0)^2 + xi^2 - z^2)."""
        return self._spectral_solve(x, lambda s: 1.0 / (s - z * z), True, z)

    def inverse(self, x: np.ndarray) -> np.ndarray:
        return self.resolvent(0.0, x)

    def abs_inverse(self, x: np.ndarray) -> np.ndarray:
        """|H_0|^{-1} x = (H_0(0)^2 + xi^2)^{-1/2} x fiber by fiber."""
        return self._spectral_solve(x, lambda s: 1.0 / np.sqrt(s), False)

    def mu0(self) -> float:
        e, _ = self.eig_internal()
        return float(np.min(np.abs(e)))

    def eigenvalues(self) -> np.ndarray:
        """All eigenvalues of the 3-D operator: sign(e) sqrt(e^2 + xi^2)."""
        e, _ = self.eig_internal()
        signs = np.sign(e)
        zero = signs == 0
        if np.any(zero):
            signs[np.flatnonzero(zero)] = np.resize([1.0, -1.0], int(zero.sum()))
        vals = signs[:, None] * np.sqrt(e[:, None] ** 2 + self.xi[None, :] ** 2)
        return np.sort(vals.ravel())

    def assemble(self) -> sp.csr_matrix:
        P3 = fourier_multiplier(self.xi)
        P3 = np.where(np.abs(P3) < 1e-15 * np.max(np.abs(P3)), 0, P3)
        a3 = alpha3_transverse(self.meta)
        M = sp.kron(self._h00, sp.identity(self.n3)) + sp.kron(a3, sp.csr_matrix(P3))
        return M.tocsr()


def build_H0_3d(lattice3: LatticeSpec, gauge: GaugeField, m: float, wilson_r: float = 1.0,
                nnz_budget: int = DEFAULT_NNZ_BUDGET, assemble: bool = True) -> OperatorMatrix:
    """H_0 = H_0(0) (x) 1 + alpha3 (x) P3, P3 the exact Fourier derivative along periodic x3."""
    if lattice3.dims != 3:
        raise LatticeError("build_H0_3d needs a 3-D lattice")
    lat4 = replace(lattice3, spinor_components=4)
    H00 = build_internal_H(lat4, gauge, m, wilson_r, components=4)
    fiber = FiberStructure(H00, lattice3.n3, lattice3.extents[2])
    meta = fiber.block_meta
    nnz = H00.sparse().nnz * meta.n3 + 2 * meta.n_sites * meta.n3 ** 2
    if not assemble:
        return OperatorMatrix(None, True, meta, fiber=fiber, name="H_0")
    if nnz > nnz_budget:
        raise LatticeError(f"assembly needs ~{nnz} nonzeros, above the budget {nnz_budget}")
    M = fiber.assemble()
    return OperatorMatrix(M, True, meta, fiber=fiber, name="H_0")


def build_F_of_P3(lattice3: LatticeSpec, F) -> OperatorMatrix:
    """1 (x) F(P3) on the full spinor space."""
    n3, L3 = lattice3.n3, lattice3.extents[2]
    f = F(fiber_momenta(n3, L3))
    Fm = fourier_multiplier(f)
    nt = lattice3.spinor_components * lattice3.n_sites
    M = sp.kron(sp.identity(nt), sp.csr_matrix(_clean(Fm)), format="csr")
    meta = BlockMeta(lattice3.spinor_components, lattice3.points[:2], n3)
    return OperatorMatrix(M, True, meta, name="F(P3)")


def _clean(M: np.ndarray) -> np.ndarray:
    # drop FFT round-off so sparse storage and Hermiticity stay exact
    M = 0.5 * (M + M.conj().T)
    scale = np.max(np.abs(M)) if M.size else 0.0
    return np.where(np.abs(M) < 1e-15 * max(scale, 1e-300), 0, M)


def conjugate_operator_ring(n3: int, L3: float, F) -> np.ndarray:
    """A3 = (Q3 F(P3) + F(P3) Q3) / 2 on the ring (dense n3 x n3)."""
    Fm = fourier_multiplier(F(fiber_momenta(n3, L3)))
    Q = np.diag(sawtooth(n3, L3))
    return _clean(0.5 * (Q @ Fm + Fm @ Q))


def build_A(lattice3: LatticeSpec, F) -> OperatorMatrix:
    """Conjugate operator A = (Q3 F(P3) + F(P3) Q3) / 2, Q3 the centred sawtooth."""
    A3 = conjugate_operator_ring(lattice3.n3, lattice3.extents[2], F)
    nt = lattice3.spinor_components * lattice3.n_sites
    M = sp.kron(sp.identity(nt), sp.csr_matrix(A3), format="csr")
    meta = BlockMeta(lattice3.spinor_components, lattice3.points[:2], lattice3.n3)
    return OperatorMatrix(M, True, meta, name="A")


def abs_inverse_chebyshev(H: OperatorMatrix, mu0: float, tol: float = 1e-8, max_degree: int = 20000):
    """Return (apply, degree) with apply(x) ~ |H|^{-1} x via Chebyshev in H^2 on [mu0^2, ||H||^2]."""
    top = H.norm_bound() ** 2
    lo = mu0 ** 2
    if lo <= 0:
        raise SpectralGapTooSmall("mu0 must be positive")
    f = lambda s: 1.0 / np.sqrt(s)
    t = np.cos(np.linspace(0, np.pi, 4001))
    probe = 0.5 * (top + lo) + 0.5 * (top - lo) * t
    degree = 16
    while True:
        cheb = np.polynomial.chebyshev.Chebyshev.interpolate(f, degree, domain=[lo, top])
        err = np.max(np.abs(cheb(probe) - f(probe)))
        if err <= tol * f(top) or err <= tol:
            break
        degree *= 2
        if degree > max_degree:
            raise SpectralGapTooSmall(f"Chebyshev degree above {max_degree}; gap too small")
    coef = cheb.coef
    a, b = 2.0 / (top - lo), -(top + lo) / (top - lo)

    def apply(x):
        def S(v):  # affine map of H^2 onto [-1, 1]
            return a * H.matvec(H.matvec(v)) + b * v
        # Clenshaw recurrence
        b1 = np.zeros_like(x, dtype=complex)
        b2 = np.zeros_like(x, dtype=complex)
        for c in coef[:0:-1]:
            b1, b2 = 2 * S(b1) - b2 + c * x, b1
        return S(b1) - b2 + coef[0] * x

    return apply, degree


def build_T_R(lattice3: LatticeSpec, H0: OperatorMatrix, F, gap_threshold: float = 1e-6,
              method: str = "auto"):
    """T = alpha3 F(P3) and R = F(P3) P3 |H_0|^{-1}.

    ``method``: ``dense`` (eigendecomposition), ``chebyshev`` (matrix-free R)
    or ``auto`` (dense up to the dense cap).
    """
    meta = H0.block_meta
    n3, L3 = lattice3.n3, lattice3.extents[2]
    xi = fiber_momenta(n3, L3)
    Fm = _clean(fourier_multiplier(F(xi)))
    T = OperatorMatrix(sp.kron(alpha3_transverse(meta), sp.csr_matrix(Fm), format="csr"), True, meta, name="T")
    FP = fourier_multiplier(F(xi) * xi)
    FPfull = sp.kron(sp.identity(meta.transverse_dim), sp.csr_matrix(_clean(FP)), format="csr")
    if method == "auto":
        method = "dense" if H0.dimension <= DENSE_CAP else "chebyshev"
    if method == "dense":
        evals, V = np.linalg.eigh(H0.toarray())
        mu = float(np.min(np.abs(evals)))
        if mu < gap_threshold * max(1.0, float(np.max(np.abs(evals)))):
            raise SpectralGapTooSmall(f"min |sigma(H_0)| = {mu:.3e}; |H_0|^-1 ill-conditioned")
        absinv = (V / np.abs(evals)) @ V.conj().T
        Rm = FPfull @ absinv
        Rm = 0.5 * (Rm + Rm.conj().T)
        return T, OperatorMatrix(Rm, True, meta, name="R")
    if H0.fiber is None:
        raise LatticeError("chebyshev path needs the fiber structure to bound the gap")
    mu = H0.fiber.mu0()
    if mu < gap_threshold * H0.norm_bound():
        raise SpectralGapTooSmall(f"mu0 = {mu:.3e}; |H_0|^-1 ill-conditioned")
    apply, _ = abs_inverse_chebyshev(H0, mu)
    n = H0.dimension
    R = spla.LinearOperator((n, n), matvec=lambda v: FPfull @ apply(v), dtype=complex)
    return T, OperatorMatrix(R, True, meta, name="R", check=False)


# ---------------------------------------------------------------------------
# commutator identities
# ---------------------------------------------------------------------------

@dataclass
class CommutatorReport:
    n3: int
    L3: float
    resolvent_commutator: float  # H0^-1 g - g H0^-1  vs  i H0^-1 alpha3 g' H0^-1
    inverse_A_commutator: float  # i[H0^-1, A]  vs  -H0^-1 alpha3 F(P3) H0^-1
    H0_A_commutator: float       # i[H0, A]  vs  alpha3 F(P3)

    def as_dict(self) -> dict:
        return {
            "n3": self.n3,
            "L3": self.L3,
            "resolvent_commutator": self.resolvent_commutator,
            "inverse_A_commutator": self.inverse_A_commutator,
            "H0_A_commutator": self.H0_A_commutator,
        }


def seam_avoiding_vectors(lattice3: LatticeSpec, count: int, seed: int, halfwidth: Optional[float] = None,
                          width: float = 1.0, momentum: float = 6.0) -> list:
    """Random transverse spinors times a modulated Gaussian in x3, cut off smoothly
    on |x3| in [halfwidth/2, halfwidth] (default L3/3, the middle two thirds).

    The carrier momentum keeps the profile's Fourier content off the ramp of
    F and below the Nyquist momentum.
    """
    from .mourre import smooth_step_eval, SmoothStepF

    rng = np.random.default_rng(seed)
    nt = 4 * lattice3.n_sites
    L3 = lattice3.extents[2]
    x3 = sawtooth(lattice3.n3, L3)
    hw = L3 / 3 if halfwidth is None else halfwidth
    if hw > L3 / 3 + 1e-12:
        raise LatticeError("test vectors must vanish within L3/6 of the x3 seam")
    cut = smooth_step_eval(SmoothStepF(), 2.0 * (1.0 - np.abs(x3) / hw))
    prof = np.exp(-0.5 * (x3 / width) ** 2 + 1j * momentum * x3) * cut
    out = []
    for _ in range(count):
        t = rng.normal(size=nt) + 1j * rng.normal(size=nt)
        v = np.outer(t, prof).ravel()
        out.append(v / np.linalg.norm(v))
    return out


def commutator_residuals(lattice3: LatticeSpec, H0: OperatorMatrix, A, F, g, test_set,
                         g_prime: Optional[Callable] = None) -> CommutatorReport:
    """Residuals of the three commutator identities on seam-avoiding test vectors.

    ``g`` is a name (``"tanh"``, ``"constant"``) or a callable with ``g_prime``.
    ``A`` is either an OperatorMatrix or None (then rebuilt on the ring).
    """
    if H0.fiber is None:
        raise LatticeError("commutator residuals need the fiber structure of H_0")
    fib = H0.fiber
    n3, L3 = lattice3.n3, lattice3.extents[2]
    if isinstance(g, str):
        g, g_prime = _named_scalar(g)
    elif g_prime is None:
        raise LatticeError("a callable g needs its derivative g_prime")
    x3 = sawtooth(n3, L3)
    gv = g(x3)
    dgv = g_prime(x3)
    if A is None:
        A3 = conjugate_operator_ring(n3, L3, F)
        applyA = lambda v: (v.reshape(-1, n3) @ A3.T).ravel()
    else:
        applyA = A.matvec
    Fsym = F(fib.xi)
    ns = fib.meta.n_sites

    def a3(v):
        return apply_alpha3(v.reshape(fib.nt, n3), ns).ravel()

    def mul(f, v):
        return (v.reshape(-1, n3) * f).ravel()

    Hinv = fib.inverse
    worst = [0.0, 0.0, 0.0]
    for psi in test_set:
        X = np.asarray(psi, dtype=complex)
        nrm = np.linalg.norm(X)
        Y = Hinv(X)
        lhs1 = Hinv(mul(gv, X)) - mul(gv, Y)
        rhs1 = 1j * Hinv(a3(mul(dgv, Y)))
        lhs2 = 1j * (Hinv(applyA(X)) - applyA(Y))
        rhs2 = -Hinv(a3(fib.fourier_apply(Fsym, Y)))
        lhs3 = 1j * (fib.apply(applyA(X)) - applyA(fib.apply(X)))
        rhs3 = a3(fib.fourier_apply(Fsym, X))
        for i, (l, r) in enumerate(((lhs1, rhs1), (lhs2, rhs2), (lhs3, rhs3))):
            worst[i] = max(worst[i], float(np.linalg.norm(l - r) / nrm))
    return CommutatorReport(n3, L3, *worst)


def _named_scalar(name: str):
    if name == "tanh":
        return np.tanh, lambda x: 1.0 / np.cosh(x) ** 2
    if name == "constant":
        return (lambda x: np.ones_like(x)), (lambda x: np.zeros_like(x))
    raise LatticeError(f"unknown scalar function {name!r}")
