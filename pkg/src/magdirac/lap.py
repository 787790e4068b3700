"""Shifted solves, weighted test states, limiting-absorption scans and gap eigenvalues."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .lattice import DENSE_CAP, LatticeSpec, OperatorMatrix, apply_alpha3, sawtooth
from .spectra import SolverError, cluster, default_cluster_tol, eig_window

WOODBURY_CAP = 6000
RESIDUAL_TOL = 1e-8
SIGN_TOL = 1e-12


class FloorViolation(ValueError):
    """eps0 is below the finite-volume level-spacing floor."""


def _support(V) -> np.ndarray:
    if V is None:
        return np.zeros(0, dtype=int)
    C = V.tocsr() if sp.issparse(V) else sp.csr_matrix(V)
    rows = np.flatnonzero(np.diff(C.indptr))
    cols = np.unique(C.indices)
    return np.union1d(rows, cols)


def support_green(fiber, z: complex, idx: np.ndarray) -> np.ndarray:
    """Block P_S (H_0 - z)^-1 P_S^T of the free resolvent on the index set ``idx``.

    Translation invariance along x3 makes the kernel depend on k3 - k3' only;
    each offset is a sum over the fiber momenta done with one inverse FFT.
    """
    n3 = fiber.n3
    e, U = fiber.eig_internal()
    t = idx // n3
    k = idx % n3
    tu, tpos = np.unique(t, return_inverse=True)
    d = (k[:, None] - k[None, :]) % n3
    du, dpos = np.unique(d, return_inverse=True)
    dpos = dpos.reshape(d.shape)
    xi = fiber.xi
    w = 1.0 / (e[:, None] ** 2 + xi[None, :] ** 2 - z * z)      # (nt, n3)
    c0 = np.fft.ifft(w, axis=1)[:, du]                             # (nt, nd)
    c1 = np.fft.ifft(w * xi[None, :], axis=1)[:, du]
    h00 = fiber._h00
    A = (h00 @ U + z * U)[tu]                                      # rows of (H00 + z) U
    B = apply_alpha3(U, fiber.meta.n_sites)[tu]                    # rows of alpha3 U
    UT = U[tu].conj()
    UTt = np.ascontiguousarray(UT.T)
    K = np.empty((du.size, tu.size, tu.size), dtype=complex)
    for i in range(du.size):
        K[i] = (A * c0[:, i]) @ UTt + (B * c1[:, i]) @ UTt
    return K[dpos, tpos[:, None], tpos[None, :]]


class ShiftedSolver:
    """x = (H - z)^-1 b for a fixed shift z.

    Dense LU below the dense cap when H is assembled without fiber; for a
    fiber operator with a finitely supported potential the exact Woodbury
    correction around the fiber resolvent; preconditioned GMRES otherwise.
    """

    def __init__(self, H, z: complex, rtol: float = 1e-12, maxiter: int = 500):
        self.H = H
        self.z = complex(z)
        self.rtol = rtol
        self.maxiter = maxiter
        self.mode = self._setup()

    def _setup(self) -> str:
        H, z = self.H, self.z
        if isinstance(H, OperatorMatrix) and H.fiber is not None:
            fib = H.fiber
            V = H.potential
            S = _support(V)
            if S.size == 0:
                return "fiber"
            if S.size <= WOODBURY_CAP:
                Vss = V.tocsr()[S][:, S].tocsc()
                G = support_green(fib, z, S)
                self._S, self._Vss = S, Vss
                # G V with V block diagonal: (V^T G^T)^T stays a sparse product
                GV = np.asarray((Vss.T @ G.T).T)
                GV[np.diag_indices_from(GV)] += 1.0
                self._lu = sla.lu_factor(GV, overwrite_a=True, check_finite=False)
                return "woodbury"
            return "gmres"
        M = H.entries if isinstance(H, OperatorMatrix) else H
        n = M.shape[0]
        if n <= DENSE_CAP:
            A = M.toarray() if sp.issparse(M) else np.asarray(M)
            self._lu = sla.lu_factor(A - z * np.eye(n))
            return "dense"
        self._splu = spla.splu((sp.csc_matrix(M) - z * sp.identity(n, format="csc")).tocsc())
        return "sparse_lu"

    def _matvec(self, x):
        H = self.H
        return H.matvec(x) if isinstance(H, OperatorMatrix) else H @ x

    def __call__(self, b: np.ndarray) -> np.ndarray:
        b = np.asarray(b, dtype=complex)
        if self.mode == "dense":
            return sla.lu_solve(self._lu, b)
        if self.mode == "sparse_lu":
            return self._splu.solve(b)
        fib = self.H.fiber
        R0 = lambda v: fib.resolvent(self.z, v)
        if self.mode == "fiber":
            return R0(b)
        if self.mode == "woodbury":
            S = self._S
            u = R0(b)
            y = sla.lu_solve(self._lu, u[S])
            corr = np.zeros_like(u)
            corr[S] = self._Vss @ y
            return R0(b - corr)
        # (1 + R0 V) x = R0 b, the free resolvent as left preconditioner
        V = self.H.potential
        n = b.shape[0]
        op = spla.LinearOperator((n, n), matvec=lambda v: v + R0(V @ v), dtype=complex)
        x, info = spla.gmres(op, R0(b), rtol=self.rtol, restart=100, maxiter=self.maxiter)
        if info != 0:
            raise SolverError(f"GMRES stopped with info={info}")
        return x

    def residual(self, x, b) -> float:
        r = self._matvec(x) - self.z * x - b
        return float(np.linalg.norm(r) / max(np.linalg.norm(b), 1e-300))


def shifted_solver(H, z: complex, **kw) -> ShiftedSolver:
    return ShiftedSolver(H, z, **kw)


def solve_shifted(H, z: complex, b, rtol: float = RESIDUAL_TOL) -> tuple:
    """(x, relative residual) for (H - z) x = b, refined once if above ``rtol``."""
    solver = ShiftedSolver(H, z)
    x = solver(b)
    res = solver.residual(x, b)
    if res > rtol:
        r = b - (solver._matvec(x) - solver.z * x)
        x = x + solver(r)
        res = solver.residual(x, b)
    if res > rtol:
        raise SolverError(f"shifted solve residual {res:.2e} above {rtol:.0e}")
    return x, res


def _norm_bound(H) -> float:
    if isinstance(H, OperatorMatrix):
        return H.norm_bound()
    M = H.toarray() if sp.issparse(H) else np.asarray(H)
    return float(np.abs(M).sum(axis=1).max())


def resolvent_apply(H, z: complex, psi, rtol: float = RESIDUAL_TOL) -> np.ndarray:
    """(H - z)^-1 psi for non-real z."""
    if abs(complex(z).imag) < 1e-12 * max(1.0, _norm_bound(H)):
        raise SolverError("near-singular shift: |Im z| below 1e-12 ||H||")
    return solve_shifted(H, z, psi, rtol)[0]


# ---------------------------------------------------------------------------
# weighted states
# ---------------------------------------------------------------------------

PROFILES = ("gaussian_x3", "polynomial_x3")


def x3_profile(lattice3: LatticeSpec, s: float, profile: str, width: float = 1.0) -> np.ndarray:
    x3 = sawtooth(lattice3.n3, lattice3.extents[2])
    if profile == "gaussian_x3":
        return np.exp(-0.5 * (x3 / width) ** 2)
    if profile == "polynomial_x3":
        return (1.0 + (x3 / width) ** 2) ** (-0.5 * (s + 1.0))
    raise ValueError(f"unknown profile {profile!r}")


def transverse_state(lattice3: LatticeSpec, mode, H00: Optional[OperatorMatrix] = None,
                     width: float = 1.0) -> np.ndarray:
    """An eigenvector of H_0(0) (integer index, ascending order) or a centred Gaussian."""
    ns = lattice3.n_sites
    if isinstance(mode, str):
        if mode != "gaussian":
            raise ValueError(f"unknown transverse mode {mode!r}")
        pts = lattice3.transverse_points()
        g = np.exp(-0.5 * np.sum(pts ** 2, axis=-1) / width ** 2)
        t = np.zeros(4 * ns, dtype=complex)
        t[:ns] = g
        return t / np.linalg.norm(t)
    if H00 is None:
        raise ValueError("an eigenvector mode needs H_0(0)")
    if H00.fiber is not None:
        _, U = H00.fiber.eig_internal()
    else:
        _, U = np.linalg.eigh(H00.toarray())
    return U[:, int(mode)].astype(complex)


def weighted_vector(lattice3: LatticeSpec, s: float, profile: str = "gaussian_x3", transverse_mode="gaussian",
                    H0: Optional[OperatorMatrix] = None, width: float = 1.0) -> np.ndarray:
    """Normalized state t (x) f(x3) whose x3 profile decays at least like <x3>^-(s+1)."""
    if not s > 0.5:
        raise ValueError("weight exponent s must exceed 1/2")
    f = x3_profile(lattice3, s, profile, width)
    t = transverse_state(lattice3, transverse_mode, H0)
    v = np.outer(t, f).ravel()
    return v / np.linalg.norm(v)


def weighted_norm(lattice3: LatticeSpec, psi: np.ndarray, s: float) -> float:
    """|| <Q3>^s psi || on the lattice."""
    x3 = sawtooth(lattice3.n3, lattice3.extents[2])
    w = (1.0 + x3 ** 2) ** (0.5 * s)
    return float(np.linalg.norm(np.asarray(psi).reshape(-1, lattice3.n3) * w))


# ---------------------------------------------------------------------------
# limiting absorption scans
# ---------------------------------------------------------------------------

@dataclass
class LapScanResult:
    lam: float
    sign: str
    epsilons: list
    values: list
    diffs: list
    verdict: str
    extrapolated_limit: Optional[complex]
    solver_residuals: list
    sign_ok: list = field(default_factory=list)

    @property
    def sign_invariant(self) -> bool:
        return all(self.sign_ok)

    def rows(self):
        for k, (e, v, r) in enumerate(zip(self.epsilons, self.values, self.solver_residuals)):
            yield self.lam, e, v.real, v.imag, (self.diffs[k - 1] if k else float("nan")), r

    def as_dict(self) -> dict:
        lim = self.extrapolated_limit
        return {
            "lambda": self.lam,
            "sign": self.sign,
            "verdict": self.verdict,
            "extrapolated_limit": None if lim is None else [lim.real, lim.imag],
            "sign_invariant": self.sign_invariant,
            "max_residual": max(self.solver_residuals) if self.solver_residuals else 0.0,
        }


def local_eigenvalues(H) -> Optional[np.ndarray]:
    """Eigenvalues used for the level-spacing floor: the free fiber spectrum, or dense eigenvalues."""
    if isinstance(H, OperatorMatrix) and H.fiber is not None:
        return H.fiber.eigenvalues()
    M = H.entries if isinstance(H, OperatorMatrix) else H
    if M.shape[0] <= DENSE_CAP:
        A = M.toarray() if sp.issparse(M) else np.asarray(M)
        return np.linalg.eigvalsh(A)
    return None


def check_floor(H, lam: float, eps0: float, levels_ref: Optional[np.ndarray] = None) -> float:
    """Mean level spacing in (lam - eps0, lam + eps0); raises when eps0 <= 5 x spacing.

    Windows with fewer than two levels have no continuum to resolve and pass.
    """
    ev = local_eigenvalues(H) if levels_ref is None else levels_ref
    if ev is None:
        return float("nan")
    n = int(np.count_nonzero(np.abs(ev - lam) < eps0))
    if n < 2:
        return float("inf")
    spacing = 2 * eps0 / n
    if eps0 <= 5 * spacing:
        raise FloorViolation(f"eps0 = {eps0:g} is not above 5 x level spacing {spacing:.3e}")
    return spacing


def classify_scan(values, conv_ratio: float = 0.75, div_growth: float = 1.9, window: int = 3) -> str:
    v = np.asarray(values)
    d = np.abs(np.diff(v))
    if d.size >= window:
        tail = d[-window:]
        if np.all(tail[:-1] > 0) and np.all(tail[1:] <= conv_ratio * tail[:-1]):
            return "convergent"
    mags = np.abs(v)
    if mags.size >= window:
        tail = mags[-window:]
        if np.all(tail[:-1] > 0) and np.all(tail[1:] >= div_growth * tail[:-1]):
            return "divergent"
    return "inconclusive"


def lap_scan(H, lam: float, psi, eps0: float, levels: int = 6, sign: str = "upper",
             check_spacing: bool = True, levels_ref: Optional[np.ndarray] = None) -> LapScanResult:
    """<psi, (H - lam -+ i eps_k)^-1 psi> with eps_k = eps0 2^-k, k = 0..levels-1."""
    if levels < 4:
        raise ValueError("need at least 4 levels")
    if sign not in ("upper", "lower"):
        raise ValueError("sign must be 'upper' or 'lower'")
    if eps0 <= 0:
        raise ValueError("eps0 must be positive")
    if check_spacing:
        check_floor(H, lam, eps0, levels_ref)
    s = 1.0 if sign == "upper" else -1.0
    psi = np.asarray(psi, dtype=complex)
    eps = [eps0 * 2.0 ** (-k) for k in range(levels)]
    vals, res, ok = [], [], []
    for e in eps:
        x, r = solve_shifted(H, lam + 1j * s * e, psi)
        v = complex(np.vdot(psi, x))
        vals.append(v)
        res.append(r)
        ok.append(s * v.imag >= -SIGN_TOL)
    diffs = [float(abs(b - a)) for a, b in zip(vals[:-1], vals[1:])]
    verdict = classify_scan(vals)
    limit = 2 * vals[-1] - vals[-2] if verdict == "convergent" else None
    return LapScanResult(float(lam), sign, eps, vals, diffs, verdict, limit, res, ok)


# ---------------------------------------------------------------------------
# gap eigenvalues across refinements
# ---------------------------------------------------------------------------

@dataclass
class GapEigenvalue:
    value: float
    multiplicity: int
    stable: bool
    trajectory: list

    def as_dict(self) -> dict:
        return {"value": self.value, "multiplicity": self.multiplicity, "stable": self.stable,
                "trajectory": list(self.trajectory)}


def _window_values(H, gap, max_count: int, cluster_tol: Optional[float]):
    """Clustered eigenvalues of H inside the open gap.

    Values within the cluster resolution of a gap edge belong to the edge
    (a band threshold hit by round-off) and are not reported.
    """
    lo, hi = gap
    if isinstance(H, OperatorMatrix) and not H.is_matrix_free and H.fiber is None and H.dimension <= DENSE_CAP:
        ev = np.linalg.eigvalsh(H.toarray())
        tol = cluster_tol if cluster_tol is not None else default_cluster_tol(float(np.max(np.abs(ev))))
        return cluster(ev[(ev > lo + tol) & (ev < hi - tol)], tol)
    tol = cluster_tol if cluster_tol is not None else default_cluster_tol(_norm_bound(H))
    res = eig_window(H, (lo + tol, hi - tol), max_count=max_count, cluster_tol=tol)
    return res.eigenvalues, res.multiplicities


def gap_eigenvalues(H: Union[Sequence, Callable], gap, refinements: int = 1, move_tol: float = 5e-2,
                    max_count: int = 64, cluster_tol: Optional[float] = None) -> list:
    """Eigenvalues inside ``gap`` tracked over refinement levels (finest level reported).

    ``H`` is a list of operators (coarse to fine) or a callable level -> operator,
    evaluated at levels 0..refinements. An eigenvalue is stable when the count
    is the same at every level and its last move is below ``move_tol``.
    """
    models = [H(k) for k in range(refinements + 1)] if callable(H) else list(H)
    if len(models) < 2:
        raise ValueError("need at least one refinement step")
    levels = [_window_values(M, gap, max_count, cluster_tol) for M in models]
    counts = [int(np.sum(m)) for _, m in levels]
    same_count = len(set(counts)) == 1
    final_vals, final_mult = levels[-1]
    out = []
    for v, mlt in zip(final_vals, final_mult):
        traj = [float(v)]
        for vals, _ in reversed(levels[:-1]):
            traj.append(float(vals[np.argmin(np.abs(vals - traj[-1]))]) if vals.size else float("nan"))
        traj = traj[::-1]
        move = abs(traj[-1] - traj[-2])
        out.append(GapEigenvalue(float(v), int(mlt), bool(same_count and move < move_tol), traj))
    return out


def embed_ring(v, n3_short: int, n3_long: int) -> np.ndarray:
    """Centre a state from a short x3 ring on a longer ring with the same spacing (zero padding)."""
    if n3_long < n3_short or (n3_long - n3_short) % 2:
        raise ValueError("the long ring must exceed the short one by an even number of points")
    V = np.asarray(v).reshape(-1, n3_short)
    out = np.zeros((V.shape[0], n3_long), dtype=complex)
    off = (n3_long - n3_short) // 2
    out[:, off:off + n3_short] = V
    return out.ravel()


def refine_eigenpair(H, sigma: float, v0=None, iterations: int = 3, seed: int = 0, tol: float = 1e-12):
    """Inverse iteration at the fixed shift ``sigma`` followed by a Rayleigh quotient.

    Used to carry an isolated eigenvalue found on a short x3 ring over to a
    long one, where bound states change only by exponentially small amounts.
    Returns (eigenvalue, unit vector, residual norm).
    """
    solver = ShiftedSolver(H, sigma)
    n = H.dimension if isinstance(H, OperatorMatrix) else H.shape[0]
    rng = np.random.default_rng(seed)
    v = rng.normal(size=n) + 1j * rng.normal(size=n) if v0 is None else np.asarray(v0, dtype=complex)
    v = v / np.linalg.norm(v)
    lam, res = float(sigma), math.inf
    for _ in range(iterations):
        v = solver(v)
        v = v / np.linalg.norm(v)
        Hv = solver._matvec(v)
        lam = float(np.vdot(v, Hv).real)
        res = float(np.linalg.norm(Hv - lam * v))
        if res < tol:
            break
    return lam, v, res
