"""Magnetic field families B(x1, x2) and their transversal-gauge potentials."""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence

import numpy as np
from scipy.interpolate import RegularGridInterpolator

FIELD_KINDS = ("constant", "periodic", "radial_power", "tabulated")


class FieldError(ValueError):
    pass


class GaugeQuadratureError(FieldError):
    """Two successive Gauss-Legendre orders disagree beyond tolerance."""


@dataclass(frozen=True)
class FieldSpec:
    """A magnetic field B(x1, x2) along the third axis.

    ``constant``: B = strength. ``periodic``: B = offset + amplitude *
    sum_k cos(k . x). ``radial_power``: B = coefficient * |x|**exponent.
    ``tabulated``: bilinear interpolation of samples on a rectangular grid.
    """

    kind: str
    strength: float = 0.0
    amplitude: float = 0.0
    wave_vectors: tuple = ()
    offset: float = 0.0
    coefficient: float = 0.0
    exponent: float = 0.0
    grid_x: tuple = ()
    grid_y: tuple = ()
    samples: tuple = ()  # row-major, shape (len(grid_x), len(grid_y))

    def __post_init__(self):
        if self.kind not in FIELD_KINDS:
            raise FieldError(f"unknown field kind {self.kind!r}")
        if self.kind == "radial_power" and self.exponent < 0:
            raise FieldError("radial_power needs exponent >= 0")
        if self.kind == "periodic":
            for k in self.wave_vectors:
                if len(k) != 2:
                    raise FieldError("wave vectors must be 2-D")
        if self.kind == "tabulated":
            nx, ny = len(self.grid_x), len(self.grid_y)
            if nx < 2 or ny < 2:
                raise FieldError("tabulated field needs at least a 2x2 grid")
            vals = np.asarray(self.samples, dtype=float)
            if vals.shape != (nx, ny):
                raise FieldError(f"samples must form a complete {nx}x{ny} grid, got {vals.shape}")
            if not np.all(np.isfinite(vals)):
                raise FieldError("tabulated samples must be finite")
            if np.any(np.diff(self.grid_x) <= 0) or np.any(np.diff(self.grid_y) <= 0):
                raise FieldError("tabulated grid must be strictly increasing")

    @classmethod
    def constant(cls, strength: float) -> "FieldSpec":
        return cls(kind="constant", strength=float(strength))

    @classmethod
    def periodic(cls, amplitude: float, wave_vectors: Sequence, offset: float = 0.0) -> "FieldSpec":
        wv = tuple(tuple(float(c) for c in k) for k in wave_vectors)
        return cls(kind="periodic", amplitude=float(amplitude), wave_vectors=wv, offset=float(offset))

    @classmethod
    def radial_power(cls, coefficient: float, exponent: float) -> "FieldSpec":
        return cls(kind="radial_power", coefficient=float(coefficient), exponent=float(exponent))

    @classmethod
    def tabulated(cls, grid_x, grid_y, samples) -> "FieldSpec":
        vals = np.asarray(samples, dtype=float)
        return cls(
            kind="tabulated",
            grid_x=tuple(map(float, grid_x)),
            grid_y=tuple(map(float, grid_y)),
            samples=tuple(map(tuple, vals)),
        )

    @property
    def is_constant(self) -> bool:
        return self.kind == "constant"

    def to_record(self) -> dict:
        if self.kind == "constant":
            return {"kind": "constant", "strength": self.strength}
        if self.kind == "periodic":
            return {
                "kind": "periodic",
                "amplitude": self.amplitude,
                "wave_vectors": [list(k) for k in self.wave_vectors],
                "offset": self.offset,
            }
        if self.kind == "radial_power":
            return {"kind": "radial_power", "coefficient": self.coefficient, "exponent": self.exponent}
        return {
            "kind": "tabulated",
            "grid_x": list(self.grid_x),
            "grid_y": list(self.grid_y),
            "samples": [list(r) for r in self.samples],
        }


@lru_cache(maxsize=None)
def _tabulated_interpolator(spec: FieldSpec):
    return RegularGridInterpolator(
        (np.asarray(spec.grid_x), np.asarray(spec.grid_y)),
        np.asarray(spec.samples, dtype=float),
        method="linear",
        bounds_error=True,
    )


def evaluate_field(spec: FieldSpec, x) -> np.ndarray | float:
    """B at point(s) ``x`` with trailing dimension 2."""
    pts = np.asarray(x, dtype=float)
    scalar = pts.ndim == 1
    pts = np.atleast_2d(pts) if scalar else pts
    if not np.all(np.isfinite(pts)):
        raise FieldError("field evaluation point must be finite")
    x1, x2 = pts[..., 0], pts[..., 1]
    if spec.kind == "constant":
        out = np.full(x1.shape, spec.strength)
    elif spec.kind == "periodic":
        out = np.full(x1.shape, spec.offset)
        for k1, k2 in spec.wave_vectors:
            out = out + spec.amplitude * np.cos(k1 * x1 + k2 * x2)
    elif spec.kind == "radial_power":
        r = np.hypot(x1, x2)
        out = spec.coefficient * r ** spec.exponent
    else:
        gx, gy = spec.grid_x, spec.grid_y
        if np.any(x1 < gx[0]) or np.any(x1 > gx[-1]) or np.any(x2 < gy[0]) or np.any(x2 > gy[-1]):
            raise FieldError("point outside the tabulated field grid")
        out = _tabulated_interpolator(spec)(pts.reshape(-1, 2)).reshape(x1.shape)
    return float(out[0]) if scalar else out


@lru_cache(maxsize=None)
def _gauss_legendre_unit(order: int):
    nodes, weights = np.polynomial.legendre.leggauss(order)
    return 0.5 * (nodes + 1.0), 0.5 * weights


def _radial_moment(spec: FieldSpec, pts: np.ndarray, order: int) -> np.ndarray:
    """I(x) = int_0^1 s B(s x) ds."""
    if spec.kind == "constant":
        return np.full(pts.shape[:-1], 0.5 * spec.strength)
    if spec.kind == "radial_power":
        # B(s x) = s**p B(x): the moment is exact
        return evaluate_field(spec, pts) / (spec.exponent + 2.0)
    s, w = _gauss_legendre_unit(order)
    scaled = pts[..., None, :] * s[:, None]
    vals = evaluate_field(spec, scaled)
    return np.einsum("...q,q->...", vals * s, w)


@dataclass(frozen=True)
class GaugeField:
    """Transversal gauge a = (-x2, x1) * int_0^1 s B(s x) ds, a3 = 0."""

    spec: FieldSpec
    quadrature_order: int = 32
    tolerance: float = 1e-8
    line_order: int = 8

    def potential(self, x) -> np.ndarray:
        pts = np.asarray(x, dtype=float)
        moment = _radial_moment(self.spec, pts, self.quadrature_order)
        if self.spec.kind in ("periodic", "tabulated"):
            check = _radial_moment(self.spec, pts, 2 * self.quadrature_order)
            scale = max(1.0, float(np.max(np.abs(check))) if check.size else 1.0)
            gap = float(np.max(np.abs(check - moment))) if check.size else 0.0
            if gap > self.tolerance * scale:
                raise GaugeQuadratureError(
                    f"gauge quadrature orders {self.quadrature_order} and "
                    f"{2 * self.quadrature_order} differ by {gap:.3e}"
                )
        return np.stack([-pts[..., 1] * moment, pts[..., 0] * moment], axis=-1)

    def a1(self, x):
        return self.potential(x)[..., 0]

    def a2(self, x):
        return self.potential(x)[..., 1]

    def line_integral(self, start, stop) -> np.ndarray:
        """int a . dl along straight segments ``start -> stop`` (arrays (..., 2))."""
        p = np.asarray(start, dtype=float)
        q = np.asarray(stop, dtype=float)
        d = q - p
        if self.spec.kind == "constant":
            # a is linear: the midpoint rule is exact
            a = self.potential(0.5 * (p + q))
            return np.sum(a * d, axis=-1)
        s, w = _gauss_legendre_unit(self.line_order)
        pts = p[..., None, :] + s[:, None] * d[..., None, :]
        a = self.potential(pts)
        return np.einsum("...qc,...c,q->...", a, d, w)


def transversal_gauge(spec: FieldSpec, x, quadrature_order: int = 32, tolerance: float = 1e-8):
    """(a1, a2) at ``x``; a scalar pair for a single point."""
    g = GaugeField(spec, quadrature_order=quadrature_order, tolerance=tolerance)
    a = g.potential(x)
    if np.asarray(x).ndim == 1:
        return float(a[0]), float(a[1])
    return a[..., 0], a[..., 1]


def curl_residual(gauge: GaugeField, spec: FieldSpec, probes, h: float) -> float:
    """max over probes of |d1 a2 - d2 a1 - B| with central differences of step h."""
    if h <= 0:
        raise FieldError("difference step must be positive")
    p = np.atleast_2d(np.asarray(probes, dtype=float))
    e1 = np.array([h, 0.0])
    e2 = np.array([0.0, h])
    d1a2 = (gauge.a2(p + e1) - gauge.a2(p - e1)) / (2 * h)
    d2a1 = (gauge.a1(p + e2) - gauge.a1(p - e2)) / (2 * h)
    return float(np.max(np.abs(d1a2 - d2a1 - evaluate_field(spec, p))))


def field_from_record(rec: dict) -> FieldSpec:
    kind = rec.get("kind")
    if kind == "constant":
        return FieldSpec.constant(rec["strength"])
    if kind == "periodic":
        return FieldSpec.periodic(rec["amplitude"], rec["wave_vectors"], rec.get("offset", 0.0))
    if kind == "radial_power":
        return FieldSpec.radial_power(rec["coefficient"], rec["exponent"])
    if kind == "tabulated":
        return FieldSpec.tabulated(rec["grid_x"], rec["grid_y"], rec["samples"])
    raise FieldError(f"unknown field kind {kind!r}")
