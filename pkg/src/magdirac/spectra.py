"""Dense and shift-invert eigensolvers, the symmetrized internal spectrum and its gaps."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .lattice import OperatorMatrix, DENSE_CAP


class SolverError(RuntimeError):
    pass


class WindowTooWide(SolverError):
    pass


@dataclass
class SpectrumResult:
    eigenvalues: np.ndarray          # clustered, strictly increasing
    multiplicities: np.ndarray
    method: str
    residual_norms: np.ndarray       # per raw eigenpair
    raw_eigenvalues: np.ndarray
    vectors: Optional[np.ndarray] = None
    cluster_tol: float = 0.0
    certified: Optional[bool] = None

    def __len__(self):
        return len(self.raw_eigenvalues)


@dataclass
class SymmetrizedSpectrum:
    values: np.ndarray
    mu0: float
    source: str = ""
    resolution: float = 1e-8


@dataclass
class GapList:
    intervals: list
    resolution: float

    def as_dict(self) -> dict:
        return {"resolution": self.resolution, "gaps": [[lo, hi] for lo, hi in self.intervals]}


def default_cluster_tol(norm: float) -> float:
    return max(1e-8, 1e-6 * norm)


def cluster(values, tol: float):
    """Group sorted values whose consecutive gaps are <= tol; returns (means, counts)."""
    v = np.sort(np.asarray(values, dtype=float))
    if v.size == 0:
        return v, np.zeros(0, dtype=int)
    breaks = np.flatnonzero(np.diff(v) > tol) + 1
    groups = np.split(v, breaks)
    return np.array([g.mean() for g in groups]), np.array([g.size for g in groups])


def _residuals(M, vals, vecs) -> np.ndarray:
    if vecs is None or vecs.shape[1] == 0:
        return np.zeros(0)
    MV = M @ vecs if not isinstance(M, OperatorMatrix) else M.matvec(vecs)
    return np.linalg.norm(MV - vecs * vals[None, :], axis=0)


def _result(M, vals, vecs, method, tol, keep_vectors, certified=None) -> SpectrumResult:
    order = np.argsort(vals)
    vals = np.asarray(vals)[order]
    vecs = vecs[:, order] if vecs is not None else None
    res = _residuals(M, vals, vecs)
    means, counts = cluster(vals, tol)
    return SpectrumResult(means, counts, method, res, vals, vecs if keep_vectors else None, tol, certified)


def eig_dense(M, cap: int = DENSE_CAP, keep_vectors: bool = False, cluster_tol: Optional[float] = None,
              values_only: bool = False) -> SpectrumResult:
    """Full spectrum with numpy's Hermitian solver.

    ``values_only`` skips eigenvectors (and hence residuals), several times faster.
    """
    if isinstance(M, OperatorMatrix):
        A = M.toarray()
    else:
        A = M.toarray() if sp.issparse(M) else np.asarray(M)
    n = A.shape[0]
    if n > cap:
        raise SolverError(f"dimension {n} above the dense cap {cap}")
    if values_only:
        vals, vecs = np.linalg.eigvalsh(A), None
    else:
        vals, vecs = np.linalg.eigh(A)
    norm = float(np.max(np.abs(vals))) if n else 0.0
    tol = cluster_tol if cluster_tol is not None else default_cluster_tol(norm)
    return _result(A, vals, vecs, "dense", tol, keep_vectors)


def inertia_count(M, lo: float, hi: float) -> int:
    """Number of eigenvalues in (lo, hi) from LDL^H inertia (Sylvester)."""
    A = M.toarray() if isinstance(M, OperatorMatrix) else (M.toarray() if sp.issparse(M) else np.asarray(M))
    n = A.shape[0]

    def below(s):
        _, d, _ = sla.ldl(A - s * np.eye(n), hermitian=True)
        ev = np.linalg.eigvalsh(d)  # d is block diagonal with 1x1 / 2x2 blocks
        return int(np.sum(ev < 0))

    return below(hi) - below(lo)


def _shift_invert_operator(M, sigma: float):
    """OPinv for eigsh: sparse LU when possible, else fiber-preconditioned GMRES."""
    if isinstance(M, OperatorMatrix) and M.is_matrix_free:
        return _iterative_inverse(M, sigma), "shift_invert_iterative"
    S = M.sparse() if isinstance(M, OperatorMatrix) else sp.csc_matrix(M)
    n = S.shape[0]
    try:
        lu = spla.splu((S - sigma * sp.identity(n, format="csc")).tocsc())
    except (MemoryError, RuntimeError):
        return _iterative_inverse(M, sigma), "shift_invert_iterative"
    return spla.LinearOperator((n, n), matvec=lu.solve, dtype=complex), "shift_invert"


def _iterative_inverse(M: OperatorMatrix, sigma: float):
    from .lap import ShiftedSolver

    n = M.dimension
    solver = ShiftedSolver(M, sigma)
    return spla.LinearOperator((n, n), matvec=solver, dtype=complex)


def eig_window(M, window, max_count: int = 64, keep_vectors: bool = False, tol: float = 1e-12,
               cluster_tol: Optional[float] = None, certify: bool = True, seed: int = 0) -> SpectrumResult:
    """All eigenvalues in the open ``window`` via shift-invert Lanczos at its midpoint.

    The number of requested pairs doubles until one lies outside the window;
    the count is checked against the LDL inertia when the matrix is dense-capable.
    """
    lo, hi = window
    if not hi > lo:
        raise ValueError("empty window")
    n = M.dimension if isinstance(M, OperatorMatrix) else M.shape[0]
    sigma = 0.5 * (lo + hi)
    OPinv, method = _shift_invert_operator(M, sigma)
    Aop = M.as_linear_operator() if isinstance(M, OperatorMatrix) else spla.aslinearoperator(M)
    rng = np.random.default_rng(seed)
    v0 = rng.normal(size=n) + 1j * rng.normal(size=n)
    k = min(8, n - 2)
    while True:
        try:
            vals, vecs = spla.eigsh(Aop, k=k, sigma=sigma, OPinv=OPinv, which="LM", tol=tol, v0=v0,
                                    ncv=min(n - 1, max(2 * k + 1, 20)))
        except spla.ArpackNoConvergence as exc:
            raise SolverError(f"shift-invert Lanczos did not converge: {exc}") from exc
        vals = np.real(vals)
        inside = (vals > lo) & (vals < hi)
        if np.count_nonzero(inside) < k or k >= n - 2:
            break
        if k > max_count:
            raise WindowTooWide(f"more than {max_count} eigenvalues in {window}")
        k = min(2 * k, n - 2)
    vals, vecs = vals[inside], vecs[:, inside]
    if vals.size > max_count:
        raise WindowTooWide(f"{vals.size} eigenvalues in {window} exceed max_count={max_count}")
    norm = M.norm_bound() if isinstance(M, OperatorMatrix) else float(abs(M).sum(axis=1).max())
    ctol = cluster_tol if cluster_tol is not None else default_cluster_tol(norm)
    certified = None
    if certify and n <= DENSE_CAP and not (isinstance(M, OperatorMatrix) and M.is_matrix_free):
        certified = inertia_count(M, lo, hi) == vals.size
        if not certified:
            raise SolverError("Lanczos count disagrees with the inertia count")
    return _result(M, vals, vecs, method, ctol, keep_vectors, certified)


def symmetrize(spec, tol: float) -> SymmetrizedSpectrum:
    """sigma_sym = sigma cup (-sigma), clustered within ``tol``; mu0 = min |value|."""
    if tol <= 0:
        raise ValueError("tol must be positive")
    vals = np.asarray(getattr(spec, "raw_eigenvalues", getattr(spec, "values", spec)), dtype=float)
    both = np.concatenate([vals, -vals])
    means, _ = cluster(both, tol)
    # the union is negation invariant; remove round-off in the cluster means
    means = 0.5 * (means - means[::-1])
    mu0 = float(np.min(np.abs(means))) if means.size else math.inf
    return SymmetrizedSpectrum(means, mu0, getattr(spec, "method", "values"), tol)


def find_gaps(sym: SymmetrizedSpectrum, search_range, min_width: float) -> GapList:
    """Maximal open subintervals of ``search_range`` free of sigma_sym, width >= min_width."""
    lo, hi = search_range
    if min_width <= sym.resolution:
        raise ValueError("min_width must exceed the cluster resolution")
    inner = [v for v in np.sort(sym.values) if lo < v < hi]
    edges = [lo] + inner + [hi]
    gaps = [(float(a), float(b)) for a, b in zip(edges[:-1], edges[1:]) if b - a >= min_width]
    return GapList(gaps, sym.resolution)


@dataclass
class SpectralSet:
    """Prediction for sigma(H_0): (-inf, -mu0] cup [mu0, inf), plus fiber dispersion."""

    mu0: float
    sym_values: np.ndarray

    @property
    def intervals(self):
        if self.mu0 <= 0:
            return [(-math.inf, math.inf)]
        return [(-math.inf, -self.mu0), (self.mu0, math.inf)]

    def contains(self, lam: float) -> bool:
        return abs(lam) >= self.mu0

    def branch(self, e: float, xi):
        """The two dispersion branches +-sqrt(e^2 + xi^2) over the internal level e."""
        r = np.sqrt(e * e + np.asarray(xi, dtype=float) ** 2)
        return -r, r

    def describe(self) -> str:
        if self.mu0 <= 0:
            return "R"
        return f"(-inf, {-self.mu0:.17g}] U [{self.mu0:.17g}, inf)"


def assemble_sigma_3d(sym: SymmetrizedSpectrum) -> SpectralSet:
    return SpectralSet(sym.mu0, np.asarray(sym.values))


EDGE_WIDTH = 3
EDGE_WEIGHT = 0.5


def boundary_sites(lattice, width: int = EDGE_WIDTH) -> np.ndarray:
    """Mask of transverse sites within ``width`` sites of a Dirichlet boundary."""
    n1, n2 = lattice.points[:2]
    i, j = np.meshgrid(np.arange(n1), np.arange(n2), indexing="ij")
    near = (np.minimum(i, n1 - 1 - i) < width) | (np.minimum(j, n2 - 1 - j) < width)
    return near.ravel()


def edge_mask(lattice, vectors: np.ndarray, width: int = EDGE_WIDTH, threshold: float = EDGE_WEIGHT) -> np.ndarray:
    """True for eigenvectors with more than ``threshold`` of their weight near the boundary.

    ``vectors`` are columns in the spinor-major transverse layout. Always
    False on magnetic-periodic lattices, which have no boundary.
    """
    vectors = np.asarray(vectors)
    if lattice.boundary != "dirichlet":
        return np.zeros(vectors.shape[1], dtype=bool)
    ns = lattice.points[0] * lattice.points[1]
    w = (np.abs(vectors) ** 2).reshape(-1, ns, vectors.shape[1]).sum(axis=0)
    near = boundary_sites(lattice, width)
    return w[near].sum(axis=0) > threshold * w.sum(axis=0)


def bulk_spectrum(M, lattice, cluster_tol: Optional[float] = None) -> tuple:
    """Dense spectrum with edge-tagged pairs removed; returns (bulk result, edge count)."""
    full = eig_dense(M, keep_vectors=True, cluster_tol=cluster_tol)
    edge = edge_mask(lattice, full.vectors)
    if not edge.any():
        full.vectors = None
        return full, 0
    vals = full.raw_eigenvalues[~edge]
    means, counts = cluster(vals, full.cluster_tol)
    res = SpectrumResult(means, counts, full.method, full.residual_norms[~edge], vals, None, full.cluster_tol)
    return res, int(edge.sum())


def internal_spectrum(lattice, gauge, m: float, wilson_r: float, tol: Optional[float] = None):
    """(SpectrumResult of H^0, SymmetrizedSpectrum) on a 2-component transverse lattice.

    On Dirichlet lattices edge-tagged eigenpairs are dropped before symmetrizing.
    """
    from dataclasses import replace
    from .lattice import build_internal_H

    lat2 = replace(lattice.transverse, spinor_components=2)
    H = build_internal_H(lat2, gauge, m, wilson_r, components=2)
    res, _ = bulk_spectrum(H, lat2)
    return res, symmetrize(res, tol if tol is not None else res.cluster_tol)
