"""Matrix potentials with Coulomb centres, decay classification and the perturbed operator."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp

from .lattice import LatticeSpec, OperatorMatrix, DENSE_CAP
from .mourre import SmoothStepF, smooth_step_eval

PROFILES = ("constant", "yukawa", "x3_power", "gaussian", "radial_power")


class HypothesisViolation(ValueError):
    """A hypothesis of the perturbation class fails (nu >= 1, Coulomb bound, ...)."""


class PotentialError(ValueError):
    pass


def _as_hermitian(mat) -> np.ndarray:
    M = np.asarray(mat, dtype=complex)
    if M.shape != (4, 4):
        raise PotentialError("matrix directions must be 4x4")
    if np.max(np.abs(M - M.conj().T)) > 1e-14:
        raise PotentialError("matrix direction is not Hermitian")
    return M


@dataclass(frozen=True)
class ProfileTerm:
    """amplitude * profile(x) * matrix.

    constant: 1; yukawa: exp(-|x - c| / range); x3_power: <x3>^(-power);
    gaussian: exp(-|x - c|^2 / (2 width^2)); radial_power: |x - c|^power.
    """

    profile: str
    amplitude: float = 1.0
    matrix: tuple = ()
    center: tuple = (0.0, 0.0, 0.0)
    range: float = 1.0
    power: float = 1.0
    width: float = 1.0

    def __post_init__(self):
        if self.profile not in PROFILES:
            raise PotentialError(f"unknown profile {self.profile!r}")
        mat = np.eye(4) if len(self.matrix) == 0 else self.matrix
        M = _as_hermitian(mat)
        object.__setattr__(self, "matrix", tuple(map(tuple, M)))

    @property
    def M(self) -> np.ndarray:
        return np.asarray(self.matrix, dtype=complex)

    def scalar(self, x: np.ndarray) -> np.ndarray:
        c = np.asarray(self.center, dtype=float)
        if self.profile == "constant":
            s = np.ones(x.shape[:-1])
        elif self.profile == "yukawa":
            s = np.exp(-np.linalg.norm(x - c, axis=-1) / self.range)
        elif self.profile == "x3_power":
            s = (1.0 + x[..., 2] ** 2) ** (-0.5 * self.power)
        elif self.profile == "gaussian":
            s = np.exp(-np.sum((x - c) ** 2, axis=-1) / (2 * self.width ** 2))
        else:
            s = np.linalg.norm(x - c, axis=-1) ** self.power
        return self.amplitude * s

    def d3_scalar(self, x: np.ndarray) -> np.ndarray:
        h = 1e-5 * np.maximum(1.0, np.abs(x[..., 2]))
        e3 = np.zeros(x.shape)
        e3[..., 2] = h
        return (self.scalar(x + e3) - self.scalar(x - e3)) / (2 * h)

    def to_record(self) -> dict:
        return {
            "profile": self.profile,
            "amplitude": self.amplitude,
            "matrix": _matrix_record(self.M),
            "center": list(self.center),
            "range": self.range,
            "power": self.power,
            "width": self.width,
        }


def _matrix_record(M):
    return [[[float(v.real), float(v.imag)] for v in row] for row in M]


def _matrix_from_record(rec):
    if rec is None:
        return None
    arr = np.asarray(rec, dtype=float)
    if arr.ndim == 3:
        return arr[..., 0] + 1j * arr[..., 1]
    return arr.astype(complex)


@dataclass(frozen=True)
class Cutoff:
    """Radial bump: 1 for |x - c| <= inner, 0 for |x - c| >= outer, smooth in between."""

    inner: float = 1.0
    outer: float = 2.0
    center: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if not 0 <= self.inner < self.outer:
            raise PotentialError("cutoff needs 0 <= inner < outer")

    def __call__(self, x) -> np.ndarray:
        r = np.linalg.norm(np.asarray(x, dtype=float) - np.asarray(self.center), axis=-1)
        return smooth_step_eval(SmoothStepF(), (self.outer - r) / (self.outer - self.inner))


@dataclass(frozen=True)
class PotentialSpec:
    regular_terms: tuple = ()
    coulomb_centers: tuple = ()
    nu: float = 0.0
    coulomb_matrix: tuple = ()
    cutoff: Cutoff = field(default_factory=Cutoff)
    vloc_terms: tuple = ()

    def __post_init__(self):
        if not 0 <= self.nu < 1:
            raise HypothesisViolation(f"coupling nu = {self.nu} must satisfy 0 <= nu < 1")
        mat = -np.eye(4) if len(self.coulomb_matrix) == 0 else self.coulomb_matrix
        object.__setattr__(self, "coulomb_matrix", tuple(map(tuple, _as_hermitian(mat))))
        object.__setattr__(self, "coulomb_centers", tuple(tuple(map(float, c)) for c in self.coulomb_centers))
        for c in self.coulomb_centers:
            if len(c) != 3:
                raise PotentialError("Coulomb centres are points in R^3")

    @property
    def C(self) -> np.ndarray:
        return np.asarray(self.coulomb_matrix, dtype=complex)

    @classmethod
    def coulomb(cls, nu: float, centers=((0.0, 0.0, 0.0),), sign: float = -1.0,
                cutoff: Optional[Cutoff] = None, regular_terms=()) -> "PotentialSpec":
        """Scalar Coulomb sign * nu / |x - a| times the cutoff; sign -1 is attractive."""
        return cls(tuple(regular_terms), tuple(centers), nu, tuple(map(tuple, sign * np.eye(4))),
                   cutoff or Cutoff())

    def with_sign(self, sign: float) -> "PotentialSpec":
        C = -np.eye(4) if sign < 0 else np.eye(4)
        return PotentialSpec(self.regular_terms, self.coulomb_centers, self.nu,
                             tuple(map(tuple, C)), self.cutoff, self.vloc_terms)

    def to_record(self) -> dict:
        return {
            "regular_terms": [t.to_record() for t in self.regular_terms],
            "coulomb_centers": [list(c) for c in self.coulomb_centers],
            "nu": self.nu,
            "coulomb_matrix": _matrix_record(self.C),
            "cutoff": {"inner": self.cutoff.inner, "outer": self.cutoff.outer, "center": list(self.cutoff.center)},
            "vloc_terms": [t.to_record() for t in self.vloc_terms],
        }


def profile_from_record(rec: dict) -> ProfileTerm:
    M = _matrix_from_record(rec.get("matrix"))
    return ProfileTerm(
        profile=rec["profile"],
        amplitude=float(rec.get("amplitude", 1.0)),
        matrix=() if M is None else tuple(map(tuple, M)),
        center=tuple(rec.get("center", (0.0, 0.0, 0.0))),
        range=float(rec.get("range", 1.0)),
        power=float(rec.get("power", 1.0)),
        width=float(rec.get("width", 1.0)),
    )


def potential_from_record(rec: dict) -> PotentialSpec:
    C = _matrix_from_record(rec.get("coulomb_matrix"))
    cut = rec.get("cutoff", {})
    return PotentialSpec(
        regular_terms=tuple(profile_from_record(t) for t in rec.get("regular_terms", [])),
        coulomb_centers=tuple(tuple(c) for c in rec.get("coulomb_centers", [])),
        nu=float(rec.get("nu", 0.0)),
        coulomb_matrix=() if C is None else tuple(map(tuple, C)),
        cutoff=Cutoff(float(cut.get("inner", 1.0)), float(cut.get("outer", 2.0)),
                      tuple(cut.get("center", (0.0, 0.0, 0.0)))),
        vloc_terms=tuple(profile_from_record(t) for t in rec.get("vloc_terms", [])),
    )


def _terms_matrix(terms, x: np.ndarray) -> np.ndarray:
    out = np.zeros(x.shape[:-1] + (4, 4), dtype=complex)
    for t in terms:
        out += t.scalar(x)[..., None, None] * t.M
    return out


def regular_part(spec: PotentialSpec, x) -> np.ndarray:
    return _terms_matrix(spec.regular_terms, np.asarray(x, dtype=float))


def coulomb_weight(spec: PotentialSpec, x: np.ndarray) -> np.ndarray:
    """sum_a nu / |x - a|; raises at a centre."""
    w = np.zeros(x.shape[:-1])
    for a in spec.coulomb_centers:
        d = np.linalg.norm(x - np.asarray(a), axis=-1)
        if np.any(d == 0):
            raise PotentialError(f"evaluation at the Coulomb centre {a}")
        w = w + spec.nu / d
    return w


def singular_coulomb_part(spec: PotentialSpec, x) -> np.ndarray:
    """V_c(x) = chi(x) C sum_a nu / |x - a|."""
    x = np.asarray(x, dtype=float)
    return (spec.cutoff(x) * coulomb_weight(spec, x))[..., None, None] * spec.C


def sample_potential(spec: PotentialSpec, x) -> np.ndarray:
    """V(x) = V_reg(x) + chi(x) [V_loc(x) + C sum_a nu/|x - a|], shape (..., 4, 4)."""
    x = np.asarray(x, dtype=float)
    V = regular_part(spec, x) + singular_coulomb_part(spec, x)
    if spec.vloc_terms:
        V = V + spec.cutoff(x)[..., None, None] * _terms_matrix(spec.vloc_terms, x)
    return V


def coulomb_bound_verify(spec: PotentialSpec, sample_points) -> float:
    """max over samples of ||V_c(x)|| - sum_a nu / |x - a| (<= 0 when the bound holds)."""
    x = np.atleast_2d(np.asarray(sample_points, dtype=float))
    Vc = singular_coulomb_part(spec, x)
    norms = np.linalg.norm(Vc, ord=2, axis=(-2, -1))
    return float(np.max(norms - coulomb_weight(spec, x)))


# ---------------------------------------------------------------------------
# decay classes
# ---------------------------------------------------------------------------

def default_theta(t):
    """theta(t) = F(2t - 1): 0 on [0, 1/2], 1 on [1, inf)."""
    return smooth_step_eval(SmoothStepF(), 2.0 * np.asarray(t, dtype=float) - 1.0)


@dataclass
class DecayReport:
    shell_sup_norms: list
    partial_short_range_integrals: list
    long_range_integrals: list
    fitted_exponent: float
    long_range_exponent: float
    verdicts: dict

    def rows(self):
        for (r, s), (_, p), (_, q) in zip(self.shell_sup_norms, self.partial_short_range_integrals,
                                          self.long_range_integrals):
            yield r, s, p, q

    def as_dict(self) -> dict:
        return {
            "fitted_exponent": self.fitted_exponent,
            "long_range_exponent": self.long_range_exponent,
            "verdicts": dict(self.verdicts),
        }


def _fibonacci_sphere(n: int) -> np.ndarray:
    i = np.arange(n) + 0.5
    phi = np.arccos(1 - 2 * i / n)
    th = np.pi * (1 + 5 ** 0.5) * i
    return np.stack([np.cos(th) * np.sin(phi), np.sin(th) * np.sin(phi), np.cos(phi)], axis=-1)


def _fit_exponent(r: np.ndarray, y: np.ndarray) -> float:
    """Least-squares slope of log y against log r over the positive tail (upper half)."""
    ok = y > 0
    if np.count_nonzero(ok) < 2:
        return -math.inf
    r, y = r[ok], y[ok]
    half = max(2, r.size // 2)
    lr, ly = np.log(r[-half:]), np.log(y[-half:])
    return float(np.polyfit(lr, ly, 1)[0])


def _spectral_norms(V: np.ndarray) -> np.ndarray:
    return np.linalg.norm(V, ord=2, axis=(-2, -1))


def classify_decay(spec: PotentialSpec, radii, theta: Callable = default_theta, n_angular: int = 64,
                   n_radial: int = 32, tail_tol: float = 1e-3) -> DecayReport:
    """Numerical decay class of the regular part (sup norms are sampled, hence under-estimates)."""
    r = np.asarray(radii, dtype=float)
    if r.size < 4:
        raise PotentialError("need at least 4 radii to fit a decay exponent")
    if np.any(r < 1) or np.any(np.diff(r) <= 0):
        raise PotentialError("radii must be increasing and >= 1")
    terms = spec.regular_terms
    # common sample cloud for |x| >= r/2 shells (makes the sup monotone in r)
    dirs = _fibonacci_sphere(n_angular)
    rad = np.concatenate([np.geomspace(rv / 2, 4 * rv, n_radial) for rv in r])
    cloud = (rad[:, None, None] * dirs[None, :, :]).reshape(-1, 3)
    nrm = _spectral_norms(_terms_matrix(terms, cloud))
    absx = np.linalg.norm(cloud, axis=-1)
    shell = [float(np.max(theta(absx / rv) * nrm)) for rv in r]
    # slabs |x3| >= r/2 for the x3-direction classes
    z = np.concatenate([np.geomspace(rv / 2, 4 * rv, n_radial) for rv in r])
    z = np.concatenate([z, -z])
    ang = np.linspace(0, 2 * np.pi, 8, endpoint=False)
    rho = np.concatenate([[0.0], np.geomspace(0.1, 4 * r[-1], n_angular // 8)])
    tp = np.stack([np.outer(rho, np.cos(ang)).ravel(), np.outer(rho, np.sin(ang)).ravel()], axis=-1)
    slab = np.concatenate([np.repeat(tp, z.size, axis=0), np.tile(z, tp.shape[0])[:, None]], axis=-1)
    nrm_s = _spectral_norms(_terms_matrix(terms, slab))
    d3 = np.zeros(slab.shape[:-1] + (4, 4), dtype=complex)
    for t in terms:
        d3 += t.d3_scalar(slab)[..., None, None] * t.M
    weighted = np.sqrt(1 + slab[:, 2] ** 2) * _spectral_norms(d3)
    ax3 = np.abs(slab[:, 2])
    sr = np.array([np.max(theta(ax3 / rv) * nrm_s) for rv in r])
    lr = np.array([np.max(theta(ax3 / rv) * weighted) for rv in r])
    grid = np.concatenate([[1.0], r]) if r[0] > 1 else r
    sr_g = np.interp(grid, r, sr)
    lr_g = np.interp(grid, r, lr) / grid
    sr_int = np.concatenate([[0.0], np.cumsum(0.5 * (sr_g[1:] + sr_g[:-1]) * np.diff(grid))])
    lr_int = np.concatenate([[0.0], np.cumsum(0.5 * (lr_g[1:] + lr_g[:-1]) * np.diff(grid))])
    if grid.size != r.size:
        sr_int, lr_int = sr_int[1:], lr_int[1:]
    shell = np.asarray(shell)
    exp_shell = _fit_exponent(r, shell)
    exp_sr = _fit_exponent(r, sr)
    exp_lr = _fit_exponent(r, lr / r)
    small = bool(shell[-1] == 0 or (exp_shell < -0.05 and shell[-1] < shell[0]))
    short = bool(sr[-1] == 0 or exp_sr < -1)
    if lr[-1] == 0:
        long_ = True
    elif exp_lr < -1:
        tail = (lr[-1] / r[-1]) * r[-1] / (-exp_lr - 1)
        long_ = bool(tail < tail_tol * max(1.0, lr_int[-1]) or exp_lr < -1.05)
    else:
        long_ = False
    return DecayReport(
        shell_sup_norms=list(zip(r.tolist(), shell.tolist())),
        partial_short_range_integrals=list(zip(r.tolist(), sr_int.tolist())),
        long_range_integrals=list(zip(r.tolist(), lr_int.tolist())),
        fitted_exponent=exp_sr,
        long_range_exponent=exp_lr,
        verdicts={"small_at_infinity": small, "short_range": short, "long_range": long_},
    )


# ---------------------------------------------------------------------------
# lattice perturbation
# ---------------------------------------------------------------------------

def lattice_points3(lattice3: LatticeSpec) -> np.ndarray:
    """All sites, ordered (site, k3) to match the operator layout."""
    t = lattice3.transverse_points()
    x3 = lattice3.coords(2)
    pts = np.concatenate([np.repeat(t, x3.size, axis=0), np.tile(x3, t.shape[0])[:, None]], axis=-1)
    return pts


def potential_matrix(spec: PotentialSpec, lattice3: LatticeSpec):
    """Site-diagonal 4x4 blocks of V on the lattice, as a sparse matrix in the operator layout."""
    pts = lattice_points3(lattice3)
    h = np.asarray(lattice3.spacing)
    for a in spec.coulomb_centers:
        if np.min(np.linalg.norm(pts - np.asarray(a), axis=-1)) < 1e-9 * float(np.min(h)):
            raise PotentialError(f"Coulomb centre {a} collides with a lattice site")
    V = sample_potential(spec, pts)
    herm = float(np.max(np.abs(V - np.conj(np.swapaxes(V, -1, -2))))) if V.size else 0.0
    if herm > 1e-14 * max(1.0, float(np.max(np.abs(V)))):
        raise PotentialError(f"sampled potential is not Hermitian (residual {herm:.2e})")
    nsite3 = pts.shape[0]
    rows, cols, vals = [], [], []
    base = np.arange(nsite3)
    for c in range(4):
        for d in range(4):
            v = V[:, c, d]
            nz = v != 0
            if np.any(nz):
                rows.append(c * nsite3 + base[nz])
                cols.append(d * nsite3 + base[nz])
                vals.append(v[nz])
    n = 4 * nsite3
    if rows:
        M = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n))
    else:
        M = sp.csr_matrix((n, n), dtype=complex)
    return M, float(np.max(_spectral_norms(V))) if V.size else 0.0


def build_perturbed_H(H0: OperatorMatrix, spec: PotentialSpec, lattice3: LatticeSpec,
                      check_points: Optional[np.ndarray] = None) -> OperatorMatrix:
    """H = H_0 + V with V sampled site by site; keeps the fiber structure for fast solves."""
    pts = lattice_points3(lattice3) if check_points is None else check_points
    if spec.coulomb_centers:
        viol = coulomb_bound_verify(spec, pts)
        if viol > 1e-12:
            raise HypothesisViolation(f"Coulomb bound violated by {viol:.3e}")
    V, vmax = potential_matrix(spec, lattice3)
    if H0.is_matrix_free:
        H = OperatorMatrix(None, True, H0.block_meta, fiber=H0.fiber, potential=V, name="H")
    else:
        H = OperatorMatrix((H0.sparse() + V).tocsr(), True, H0.block_meta, fiber=H0.fiber, potential=V,
                           name="H")
    H.max_sampled_norm = vmax
    return H


# ---------------------------------------------------------------------------
# localisation of resolvent differences
# ---------------------------------------------------------------------------

@dataclass
class DecayTable:
    radii: np.ndarray
    norms: np.ndarray
    fitted_exponent: float

    @property
    def short_range_like(self) -> bool:
        return self.fitted_exponent < -1


def _site_radii(meta, lattice3: LatticeSpec) -> np.ndarray:
    pts = lattice_points3(lattice3)
    r = np.linalg.norm(pts, axis=-1)
    return np.tile(r, meta.n_spinor)


def resolvent_localization_decay(H_reg: OperatorMatrix, H: OperatorMatrix, z: complex, radii,
                                 lattice3: LatticeSpec, theta: Callable = default_theta,
                                 spectrum_guard: float = 1e-6) -> DecayTable:
    """|| theta(|Q|/r) [(H_reg - z)^-1 - (H - z)^-1] || over r, with a power-law fit.

    Uses R_reg - R = R_reg (H - H_reg) R, a low-rank product when the two
    operators differ on few sites; both factors are exact sparse solves.
    """
    n = H.dimension
    if n > DENSE_CAP:
        raise PotentialError(f"dimension {n} above the dense cap")
    Ar, A = H_reg.toarray(), H.toarray()
    # Hermitian spectra are real, so |Im z| already bounds the distance
    if abs(complex(z).imag) < spectrum_guard:
        for M in (Ar, A):
            ev = np.linalg.eigvalsh(M)
            if np.min(np.abs(ev - z)) < spectrum_guard:
                raise PotentialError("z is too close to the spectrum")
    D = A - Ar
    support = np.flatnonzero(np.any(D != 0, axis=0) | np.any(D != 0, axis=1))
    r = np.asarray(radii, dtype=float)
    if support.size == 0:
        return DecayTable(r, np.zeros_like(r), -math.inf)
    eye = np.eye(n)
    Rreg_cols = np.linalg.solve(Ar - z * eye, eye[:, support])            # R_reg[:, S]
    R_rows = np.linalg.solve((A - z * eye).conj().T, eye[:, support]).conj().T  # R[S, :]
    Y = D[np.ix_(support, support)] @ R_rows                              # k x n
    # ||diag(w) X Y|| = ||diag(w) X L|| with Y Y^H = L L^H
    G = Y @ Y.conj().T
    w, U = np.linalg.eigh(0.5 * (G + G.conj().T))
    L = U * np.sqrt(np.maximum(w, 0.0))
    rad = _site_radii(H.block_meta, lattice3)
    norms = []
    for rv in r:
        wt = theta(rad / rv)
        norms.append(float(np.linalg.norm((wt[:, None] * Rreg_cols) @ L, 2)))
    norms = np.asarray(norms)
    return DecayTable(r, norms, _fit_exponent(r, norms) if np.any(norms > 0) else -math.inf)
