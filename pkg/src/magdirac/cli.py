"""Command-line driver: JSON config in, deterministic CSV/JSON reports out.

    python -m magdirac <command> <config.json> [--out-dir DIR]

Commands: internal-spectrum, mourre-sweep, perturbed-analysis, lap-scan, selftest.
Exit codes: 0 success, 2 config error, 3 solver error, 4 hypothesis violation.
"""
from __future__ import annotations

import argparse
import json
import math
import sys
from dataclasses import replace

import jsonschema
import numpy as np

from .fields import FieldError, FieldSpec, GaugeField, field_from_record
from .lattice import (
    DENSE_CAP, LatticeError, LatticeSpec, build_H0_3d, build_internal_H, build_T_R,
)
from .lap import FloorViolation, embed_ring, gap_eigenvalues, lap_scan, refine_eigenpair, weighted_vector
from .mourre import DenseModel, SmoothStepF, measured_rho, window_lower_bound
from .potentials import (
    HypothesisViolation, PotentialError, build_perturbed_H, classify_decay, coulomb_bound_verify,
    lattice_points3, potential_from_record,
)
from .report import ReportWriter
from .spectra import SolverError, bulk_spectrum, default_cluster_tol, eig_window, find_gaps, symmetrize

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER, EXIT_HYPOTHESIS = 0, 2, 3, 4
COMMANDS = ("internal-spectrum", "mourre-sweep", "perturbed-analysis", "lap-scan", "selftest")


class ConfigError(ValueError):
    pass


_num = {"type": "number"}
_pair = {"type": "array", "items": _num, "minItems": 2, "maxItems": 2}
_lattice = {
    "type": "object",
    "additionalProperties": False,
    "required": ["points"],
    "properties": {
        "extents": {"oneOf": [{"type": "array", "items": _num}, {"const": "auto"}]},
        "points": {"type": "array", "items": {"type": "integer"}, "minItems": 2, "maxItems": 3},
        "boundary": {"enum": ["magnetic_periodic", "dirichlet"]},
        "flux_quanta": {"type": "integer", "minimum": 0},
        "L3": _num,
    },
}
_matrix = {"type": "array"}
_profile = {
    "type": "object",
    "additionalProperties": False,
    "required": ["profile"],
    "properties": {
        "profile": {"enum": ["constant", "yukawa", "x3_power", "gaussian", "radial_power"]},
        "amplitude": _num, "matrix": _matrix, "center": {"type": "array", "items": _num},
        "range": _num, "power": _num, "width": _num,
    },
}
_potential = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "regular_terms": {"type": "array", "items": _profile},
        "coulomb_centers": {"type": "array", "items": {"type": "array", "items": _num, "minItems": 3, "maxItems": 3}},
        "nu": {"type": "number", "minimum": 0},
        "coulomb_matrix": _matrix,
        "cutoff": {"type": "object", "additionalProperties": False,
                   "properties": {"inner": _num, "outer": _num, "center": {"type": "array", "items": _num}}},
        "vloc_terms": {"type": "array", "items": _profile},
    },
}
_lambdas = {"oneOf": [
    {"type": "array", "items": _num},
    {"type": "object", "additionalProperties": False, "required": ["start", "stop", "num"],
     "properties": {"start": _num, "stop": _num, "num": {"type": "integer", "minimum": 0}}},
]}
SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["field", "mass", "lattice"],
    "properties": {
        "field": {"type": "object"},
        "mass": {"type": "number", "exclusiveMinimum": 0},
        "lattice": _lattice,
        "wilson_r": {"type": "number", "minimum": 0},
        "F": {"enum": ["bump_integral", "hard_step", "odd_bump_integral"]},
        "potential": _potential,
        "seed": {"type": "integer"},
        "internal_spectrum": {
            "type": "object", "additionalProperties": False,
            "properties": {"search_range": _pair, "min_gap_width": _num, "cluster_tol": _num,
                           "landau_levels": {"type": "integer", "minimum": 0}},
        },
        "mourre": {
            "type": "object", "additionalProperties": False,
            "properties": {"lambdas": _lambdas, "epsilon": {"type": "number", "exclusiveMinimum": 0},
                           "measured": {"type": "boolean"}},
        },
        "perturbed": {
            "type": "object", "additionalProperties": False,
            "properties": {"resolutions": {"type": "array", "items": _lattice, "minItems": 2},
                           "gap": _pair, "radii": {"type": "array", "items": _num},
                           "move_tol": _num, "max_count": {"type": "integer", "minimum": 1}},
        },
        "lap": {
            "type": "object", "additionalProperties": False,
            "properties": {"lambdas": _lambdas, "eps0": {"type": "number", "exclusiveMinimum": 0},
                           "levels": {"type": "integer", "minimum": 4}, "sign": {"enum": ["upper", "lower"]},
                           "s": _num, "profile": {"enum": ["gaussian_x3", "polynomial_x3"]},
                           "transverse_mode": {"oneOf": [{"type": "integer"}, {"const": "gaussian"}]},
                           "perturbed": {"type": "boolean"}, "planted": {"type": "boolean"}},
        },
    },
}


# ---------------------------------------------------------------------------
# config
# ---------------------------------------------------------------------------

def load_config(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            cfg = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    validate_config(cfg)
    return cfg


def validate_config(cfg) -> None:
    try:
        jsonschema.validate(cfg, SCHEMA)
    except jsonschema.ValidationError as exc:
        raise ConfigError(f"config schema: {exc.message} at {list(exc.absolute_path)}") from exc
    try:
        field_from_record(cfg["field"])
    except (FieldError, KeyError, TypeError) as exc:
        raise ConfigError(f"field: {exc}") from exc
    if "potential" in cfg and cfg["potential"].get("nu", 0.0) >= 1:
        pass  # a hypothesis violation, reported with exit code 4 by the command


def lattice_from_record(rec: dict, field: FieldSpec) -> LatticeSpec:
    points = tuple(rec["points"])
    boundary = rec.get("boundary", "magnetic_periodic" if field.is_constant and field.strength else "dirichlet")
    flux = int(rec.get("flux_quanta", 0))
    ext = rec.get("extents", "auto")
    if ext == "auto":
        if boundary != "magnetic_periodic":
            raise ConfigError("extents 'auto' needs a magnetic_periodic boundary")
        L = math.sqrt(2 * math.pi * flux / field.strength)
        ext = [L, L]
        if len(points) == 3:
            if "L3" not in rec:
                raise ConfigError("3-D lattice with automatic extents needs L3")
            ext.append(float(rec["L3"]))
    try:
        return LatticeSpec(tuple(ext), points, boundary, flux)
    except LatticeError as exc:
        raise ConfigError(f"lattice: {exc}") from exc


class Context:
    def __init__(self, cfg: dict):
        self.cfg = cfg
        self.field = field_from_record(cfg["field"])
        self.gauge = GaugeField(self.field)
        self.mass = float(cfg["mass"])
        self.wilson_r = float(cfg.get("wilson_r", 1.0))
        self.F = SmoothStepF(cfg.get("F", "bump_integral"))
        self.edge_count = 0
        self.lattice = lattice_from_record(cfg["lattice"], self.field)
        try:
            self.lattice.check_flux(self.field)
        except LatticeError as exc:
            raise ConfigError(str(exc)) from exc

    def internal(self, lattice=None):
        lat = (lattice or self.lattice).transverse
        lat2 = replace(lat, spinor_components=2)
        H = build_internal_H(lat2, self.gauge, self.mass, self.wilson_r, 2)
        res, self.edge_count = bulk_spectrum(H, lat2)
        return res, symmetrize(res, res.cluster_tol)

    def lattice3(self, lattice=None) -> LatticeSpec:
        lat = lattice or self.lattice
        if lat.dims != 3:
            raise ConfigError("this command needs a 3-D lattice (points of length 3)")
        return lat


def _lambda_grid(spec) -> list:
    if isinstance(spec, dict):
        return [float(v) for v in np.linspace(spec["start"], spec["stop"], spec["num"])]
    return [float(v) for v in spec]


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_internal_spectrum(ctx: Context, out: ReportWriter) -> dict:
    opts = ctx.cfg.get("internal_spectrum", {})
    res, sym = ctx.internal()
    if "cluster_tol" in opts:
        sym = symmetrize(res, float(opts["cluster_tol"]))
    top = float(np.max(np.abs(sym.values))) if sym.values.size else 1.0
    lo, hi = opts.get("search_range", [-top, top])
    gaps = find_gaps(sym, (lo, hi), float(opts.get("min_gap_width", 1e-3)))
    # residual column: worst raw pair inside each cluster
    bounds = np.concatenate([[0], np.cumsum(res.multiplicities)])
    worst = [float(np.max(res.residual_norms[a:b])) for a, b in zip(bounds[:-1], bounds[1:])]
    out.csv("internal_spectrum.csv", ["index", "eigenvalue", "multiplicity", "residual"],
            ((i, v, int(m), r) for i, (v, m, r) in enumerate(zip(res.eigenvalues, res.multiplicities, worst))))
    out.csv("sigma_sym.csv", ["index", "value"], enumerate(sym.values))
    summary = {"mu0": sym.mu0, "gaps": gaps.as_dict()["gaps"], "resolution": gaps.resolution,
               "dimension": int(len(res)), "edge_states": ctx.edge_count}
    if ctx.field.is_constant:
        n_levels = int(opts.get("landau_levels", 4))
        B = abs(ctx.field.strength)
        summary["analytic_levels"] = [math.sqrt(2 * n * B + ctx.mass ** 2) for n in range(n_levels)]
    out.json("gaps.json", summary)
    return summary


def cmd_mourre_sweep(ctx: Context, out: ReportWriter) -> dict:
    opts = ctx.cfg.get("mourre", {})
    lams = _lambda_grid(opts.get("lambdas", {"start": 0.0, "stop": 2.0, "num": 41}))
    eps = float(opts.get("epsilon", 0.02))
    _, sym = ctx.internal()
    out.csv("sigma_sym.csv", ["index", "value"], enumerate(sym.values))
    measured = bool(opts.get("measured", False))
    model = T = None
    if measured:
        lat3 = ctx.lattice3()
        H0 = build_H0_3d(lat3, ctx.gauge, ctx.mass, ctx.wilson_r)
        if H0.dimension > DENSE_CAP:
            raise SolverError(f"measured mode needs a dense-capable model, dimension {H0.dimension}")
        T, _ = build_T_R(lat3, H0, ctx.F, method="dense")
        model = DenseModel(H0)
    rows = []
    violations = 0
    for lam in lams:
        if lam == 0:
            bound = 0.0 if np.any(np.isclose(sym.values, 0.0)) else math.inf
        else:
            bound = window_lower_bound(lam, eps, sym, ctx.F)
        on_sym = bool(np.any(np.abs(np.abs(sym.values) - abs(lam)) <= eps))
        meas, dim = float("nan"), 0
        if measured and lam != 0:
            S = T if lam > 0 else -T
            meas, dim = measured_rho(model, S, lam, eps)
            if dim and meas < bound - 1e-6:
                violations += 1
        rows.append((lam, eps, bound, meas, dim, on_sym))
    out.csv("mourre_sweep.csv", ["lambda", "epsilon", "bound_formula", "measured_inf", "window_dim", "near_sigma_sym"],
            rows)
    summary = {"rows": len(rows), "measured": measured, "violations": violations, "mu0": sym.mu0}
    out.json("mourre_summary.json", summary)
    return summary


def _potential(ctx: Context):
    if "potential" not in ctx.cfg:
        raise ConfigError("perturbed analysis needs a 'potential' block")
    try:
        return potential_from_record(ctx.cfg["potential"])
    except PotentialError as exc:
        raise ConfigError(f"potential: {exc}") from exc


def cmd_perturbed_analysis(ctx: Context, out: ReportWriter) -> dict:
    spec = _potential(ctx)
    opts = ctx.cfg.get("perturbed", {})
    resolutions = [lattice_from_record(r, ctx.field) for r in opts.get("resolutions", [])] or [ctx.lattice3()]
    if len(resolutions) < 2:
        raise ConfigError("perturbed analysis needs at least two resolutions")
    gap = tuple(opts.get("gap", [-ctx.mass, ctx.mass]))
    violation = max(coulomb_bound_verify(spec, lattice_points3(ctx.lattice3(lat))) for lat in resolutions) \
        if spec.coulomb_centers else -math.inf
    if violation > 1e-12:
        out.json("coulomb_bound.json", {"max_violation": violation, "passed": False})
        raise HypothesisViolation(f"Coulomb bound violated by {violation:.3e}")
    models, edges = [], []
    for lat in resolutions:
        H0 = build_H0_3d(ctx.lattice3(lat), ctx.gauge, ctx.mass, ctx.wilson_r, assemble=False)
        edges.append(H0.fiber.mu0())
        models.append(build_perturbed_H(H0, spec, lat))
    table = gap_eigenvalues(models, gap, refinements=len(models) - 1, move_tol=float(opts.get("move_tol", 5e-2)),
                            max_count=int(opts.get("max_count", 64)))
    out.csv("gap_eigenvalues.csv", ["index", "eigenvalue", "multiplicity", "stable"] +
            [f"level{k}" for k in range(len(models))],
            ((i, e.value, e.multiplicity, e.stable, *e.trajectory) for i, e in enumerate(table)))
    radii = opts.get("radii", [1, 2, 4, 8, 16, 32])
    decay = classify_decay(spec, radii)
    out.csv("decay.csv", ["r", "shell_sup_norm", "short_range_partial", "long_range_partial"], decay.rows())
    summary = {
        "coulomb_bound": {"max_violation": violation, "passed": True},
        "decay": decay.as_dict(),
        "gap": list(gap),
        "free_spectral_edges": edges,
        "free_gap_eigenvalue_count": 0,
        "gap_eigenvalues": [e.as_dict() for e in table],
    }
    out.json("perturbed_summary.json", summary)
    return summary


SHORT_RING = 128


def _planted_eigenvalues(ctx: Context, lat3: LatticeSpec, H0, H) -> list:
    """Gap eigenvalues of H, found on a short x3 ring and polished on the full one.

    Bound states decay exponentially along x3, so a ring of SHORT_RING points at
    the same spacing already carries them. Inverse iteration then moves each
    one onto the long ring at the cost of a single factorization.
    """
    mu = H0.fiber.mu0()
    n3 = lat3.n3
    if n3 <= SHORT_RING:
        return [float(v) for v in eig_window(H, (-mu, mu)).eigenvalues]
    h3 = lat3.extents[2] / n3
    ns = SHORT_RING + (n3 - SHORT_RING) % 2
    short = LatticeSpec(tuple(lat3.extents[:2]) + (h3 * ns,), tuple(lat3.points[:2]) + (ns,),
                        lat3.boundary, lat3.flux_quanta)
    H0s = build_H0_3d(short, ctx.gauge, ctx.mass, ctx.wilson_r, assemble=False)
    Hs = build_perturbed_H(H0s, _potential(ctx), short)
    edge = H0s.fiber.mu0() - default_cluster_tol(Hs.norm_bound())
    found = eig_window(Hs, (-edge, edge), keep_vectors=True)
    if found.eigenvalues.size == 0:
        return []
    out = []
    first = np.concatenate([[0], np.cumsum(found.multiplicities)[:-1]]).astype(int)
    for e, v in zip(found.eigenvalues, found.vectors[:, first].T):
        lam, _, res = refine_eigenpair(H, float(e), embed_ring(v, ns, n3), iterations=6)
        if res > 1e-6 or not -mu < lam < mu:
            raise SolverError(f"eigenvalue {e:.6g} did not survive the move to the full ring (residual {res:.2e})")
        out.append(lam)
    return out


def cmd_lap_scan(ctx: Context, out: ReportWriter) -> dict:
    opts = ctx.cfg.get("lap", {})
    lams = _lambda_grid(opts.get("lambdas", []))
    lat3 = ctx.lattice3()
    H0 = build_H0_3d(lat3, ctx.gauge, ctx.mass, ctx.wilson_r, assemble=False)
    H = H0
    if opts.get("perturbed", False):
        H = build_perturbed_H(H0, _potential(ctx), lat3)
    planted = []
    if opts.get("planted", False):
        if H is H0:
            raise ConfigError("planted eigenvalues need a perturbed operator")
        planted = _planted_eigenvalues(ctx, lat3, H0, H)
        lams = lams + planted
    psi = weighted_vector(lat3, float(opts.get("s", 1.0)), opts.get("profile", "gaussian_x3"),
                          opts.get("transverse_mode", "gaussian"), H0)
    levels_ref = H0.fiber.eigenvalues()
    mu0 = H0.fiber.mu0()
    summary = []
    for i, lam in enumerate(lams):
        r = lap_scan(H, lam, psi, float(opts.get("eps0", 0.2)), int(opts.get("levels", 6)),
                     opts.get("sign", "upper"), levels_ref=levels_ref)
        out.csv(f"lap_{i:03d}.csv", ["lambda", "epsilon", "re", "im", "diff", "residual"], r.rows())
        entry = {**r.as_dict(), "planted": lam in planted}
        if lam in planted:
            # a scan cannot separate an eigenvalue closer to the band edge than eps0 from the edge
            entry["edge_distance"] = mu0 - abs(lam)
        summary.append(entry)
    out.json("lap_summary.json", {"scans": summary})
    return {"scans": summary}


SELFTEST_CONFIG = {
    "field": {"kind": "constant", "strength": 1.0},
    "mass": 1.0,
    "wilson_r": 0.5,
    "lattice": {"points": [6, 6, 12], "flux_quanta": 1, "L3": 6.0},
    "potential": {"nu": 0.5, "coulomb_centers": [[0.0, 0.0, 0.0]], "cutoff": {"inner": 0.5, "outer": 1.0}},
    "mourre": {"lambdas": {"start": -2.4, "stop": 2.4, "num": 25}, "epsilon": 0.02, "measured": True},
    "lap": {"lambdas": [-40.0], "eps0": 0.4, "levels": 5},
}


def cmd_selftest(ctx: Context, out: ReportWriter) -> dict:
    """Small fixed pipeline: internal spectrum, measured Mourre sweep and one LAP scan."""
    a = cmd_internal_spectrum(ctx, out)
    b = cmd_mourre_sweep(ctx, out)
    c = cmd_lap_scan(ctx, out)
    summary = {"internal_mu0": a["mu0"], "mourre_rows": b["rows"], "lap_scans": len(c["scans"])}
    out.json("selftest.json", summary)
    return summary


DISPATCH = {
    "internal-spectrum": cmd_internal_spectrum,
    "mourre-sweep": cmd_mourre_sweep,
    "perturbed-analysis": cmd_perturbed_analysis,
    "lap-scan": cmd_lap_scan,
    "selftest": cmd_selftest,
}


def run(command: str, cfg: dict, out_dir) -> dict:
    """Validate, dispatch and write reports; exceptions propagate."""
    validate_config(cfg)
    ctx = Context(cfg)
    out = ReportWriter(out_dir, cfg)
    if "potential" in cfg:
        try:
            potential_from_record(cfg["potential"])
        except PotentialError as exc:
            raise ConfigError(f"potential: {exc}") from exc
        except HypothesisViolation as exc:
            out.json("coulomb_bound.json", {"passed": False, "nu": cfg["potential"].get("nu"), "reason": str(exc)})
            raise
    return DISPATCH[command](ctx, out)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="magdirac", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("config", nargs="?", help="JSON config (selftest uses a built-in one if omitted)")
    parser.add_argument("--out-dir", default="out")
    args = parser.parse_args(argv)
    try:
        if args.config is None:
            if args.command != "selftest":
                raise ConfigError("a config file is required")
            cfg = json.loads(json.dumps(SELFTEST_CONFIG))
        else:
            cfg = load_config(args.config)
        run(args.command, cfg, args.out_dir)
    except (ConfigError, FieldError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except HypothesisViolation as exc:
        print(f"hypothesis violation: {exc}", file=sys.stderr)
        return EXIT_HYPOTHESIS
    except (SolverError, FloorViolation, LatticeError, PotentialError, np.linalg.LinAlgError) as exc:
        print(f"solver error: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
