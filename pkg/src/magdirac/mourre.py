"""Smooth step F, the rho-function lower bound, and dense checks of the Mourre inequality."""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import integrate

from .lattice import OperatorMatrix, DENSE_CAP

F_KINDS = ("bump_integral", "hard_step", "odd_bump_integral")
HARD_STEP_WIDTH = 1e-6


def _bump(t):
    t = np.asarray(t, dtype=float)
    out = np.zeros_like(t)
    inside = (t > 0) & (t < 1)
    ti = t[inside]
    out[inside] = np.exp(-1.0 / (ti * (1.0 - ti)))
    return out


@lru_cache(maxsize=None)
def _bump_norm() -> float:
    val, _ = integrate.quad(lambda t: math.exp(-1.0 / (t * (1.0 - t))), 0.0, 1.0, epsabs=0, epsrel=1e-13, limit=200)
    return val


@lru_cache(maxsize=None)
def _gl(order: int):
    s, w = np.polynomial.legendre.leggauss(order)
    return 0.5 * (s + 1.0), 0.5 * w


def _bump_step(x) -> np.ndarray:
    """Normalized int_0^x exp(-1/(t(1-t))) dt, clipped to [0, 1]; exactly 1/2 at x = 1/2."""
    x = np.asarray(x, dtype=float)
    out = np.where(x >= 1.0, 1.0, 0.0)
    mid = (x > 0) & (x < 1)
    if np.any(mid):
        xm = x[mid]
        s, w = _gl(64)
        t = 0.5 + (xm[:, None] - 0.5) * s[None, :]
        part = (xm - 0.5) * (_bump(t) @ w)
        out = out.astype(float)
        out[mid] = np.clip(0.5 + part / _bump_norm(), 0.0, 1.0)
    return out


@dataclass(frozen=True)
class SmoothStepF:
    """Non-decreasing smooth F with F = 0 on (-inf, 0] and F = 1 on [1, inf).

    ``hard_step`` compresses the ramp to width 1e-6. ``odd_bump_integral`` is
    the odd extension sign(x) F(|x|); it does not vanish on the negative axis.
    """

    kind: str = "bump_integral"

    def __post_init__(self):
        if self.kind not in F_KINDS:
            raise ValueError(f"unknown F kind {self.kind!r}")

    def __call__(self, x):
        return smooth_step_eval(self, x)

    def derivative(self, x):
        return smooth_step_eval(self, x, derivative=True)


def smooth_step_eval(F: SmoothStepF, x, derivative: bool = False):
    scalar = np.ndim(x) == 0
    xv = np.asarray(x, dtype=float)
    if F.kind == "bump_integral":
        val = _bump(xv) / _bump_norm() if derivative else _bump_step(xv)
    elif F.kind == "hard_step":
        d = HARD_STEP_WIDTH
        val = _bump(xv / d) / (_bump_norm() * d) if derivative else _bump_step(xv / d)
    else:
        ax = np.abs(xv)
        val = _bump(ax) / _bump_norm() if derivative else np.sign(xv) * _bump_step(ax)
    return float(val) if scalar else val


def mourre_lower_bound(lam: float, sym, F: SmoothStepF) -> float:
    """inf over mu in sigma_sym with 0 <= mu <= |lam| of F(sqrt(lam^2-mu^2)) sqrt(lam^2-mu^2) / |lam|.

    +inf over an empty set. lam < 0 is the mirrored (-A) side.
    """
    values = np.asarray(getattr(sym, "values", sym), dtype=float)
    a = abs(float(lam))
    cand = values[(values >= 0) & (values <= a)]
    if cand.size == 0:
        return math.inf
    if a == 0:
        return 0.0
    k = np.sqrt(np.maximum(a * a - cand * cand, 0.0))
    return float(np.min(smooth_step_eval(F, k) * k / a))


def window_lower_bound(lam: float, eps: float, sym, F: SmoothStepF) -> float:
    """Worst case of :func:`mourre_lower_bound` over [lam - eps, lam + eps] on one side of 0.

    Each branch of the formula is non-decreasing in |lam| and drops to 0 at
    every sigma_sym point, so the minimum sits at the inner edge or at a
    sigma_sym point inside the window.
    """
    values = np.asarray(getattr(sym, "values", sym), dtype=float)
    sgn = 1.0 if lam > 0 else -1.0
    inner = max(abs(lam) - eps, 0.0)
    outer = abs(lam) + eps
    pts = [inner] + [v for v in np.abs(values) if inner <= v <= outer]
    return min(mourre_lower_bound(sgn * p, values, F) for p in pts)


@dataclass
class MourreReport:
    lam: float
    epsilon: float
    bound_formula: float
    measured_inf: float
    window_dim: int
    tolerance: float = 1e-6

    @property
    def satisfied(self) -> bool:
        if self.window_dim == 0:
            return True
        return self.measured_inf >= self.bound_formula - self.tolerance

    def as_dict(self) -> dict:
        return {
            "lambda": self.lam,
            "epsilon": self.epsilon,
            "bound_formula": self.bound_formula,
            "measured_inf": self.measured_inf,
            "window_dim": self.window_dim,
            "satisfied": self.satisfied,
        }


class DenseModel:
    """Eigendecomposition of a dense-capable H_0 reused across windows."""

    def __init__(self, H0: OperatorMatrix, cluster_tol: float | None = None):
        if H0.dimension > DENSE_CAP:
            raise ValueError(f"dimension {H0.dimension} above the dense cap {DENSE_CAP}")
        self.H0 = H0
        self.evals, self.evecs = np.linalg.eigh(H0.toarray())
        scale = float(np.max(np.abs(self.evals))) if self.evals.size else 0.0
        self.tol = cluster_tol if cluster_tol is not None else max(1e-8, 1e-6 * scale)

    def window_basis(self, lam: float, eps: float) -> np.ndarray:
        # membership of a whole cluster is decided by its centre
        inside = (self.evals > lam - eps + self.tol) & (self.evals < lam + eps - self.tol)
        return self.evecs[:, inside]

    def projected(self, S, lam: float, eps: float) -> np.ndarray:
        V = self.window_basis(lam, eps)
        if V.shape[1] == 0:
            return np.zeros((0, 0), dtype=complex)
        SV = _apply(S, V)
        P = V.conj().T @ SV
        return 0.5 * (P + P.conj().T)


def _apply(S, V):
    if isinstance(S, OperatorMatrix):
        e = S.entries
        return e @ V if not hasattr(e, "matmat") else e.matmat(V)
    return S @ V


def measured_rho(model: DenseModel, S, lam: float, eps: float) -> tuple:
    """(min eigenvalue of E S E on range E, dim range E); +inf for an empty window."""
    P = model.projected(S, lam, eps)
    if P.shape[0] == 0:
        return math.inf, 0
    return float(np.linalg.eigvalsh(P)[0]), P.shape[0]


def verify_mourre_inequality(H0, T, window, sym_discrete, F: SmoothStepF, model: DenseModel | None = None,
                             tolerance: float = 1e-6) -> MourreReport:
    """Measured rho^T(lam; eps) against the formula bound with the discrete sigma_sym.

    For lam < 0 pass ``-T`` (the -A side).
    """
    lam, eps = window
    if eps <= 0:
        raise ValueError("window half-width must be positive")
    model = model or DenseModel(H0)
    measured, dim = measured_rho(model, T, lam, eps)
    bound = window_lower_bound(lam, eps, sym_discrete, F)
    return MourreReport(lam, eps, bound, measured, dim, tolerance)


def rho_T_vs_R_check(H0, T, R, window, model: DenseModel | None = None) -> float:
    """Spectral norm of E (T - R) E on range E; pass ``-T`` for negative windows."""
    lam, eps = window
    if eps <= 0 or abs(lam) - eps <= 0:
        raise ValueError("window must stay away from 0: need |lam| > eps > 0")
    model = model or DenseModel(H0)
    V = model.window_basis(lam, eps)
    if V.shape[1] == 0:
        return 0.0
    D = V.conj().T @ (_apply(T, V) - _apply(R, V))
    return float(np.linalg.norm(D, 2))
