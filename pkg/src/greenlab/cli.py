"""Scenario runner and small command-line utilities.

    greenlab run <scenario.json> [--out DIR] [--threads N] [--seed S]
    greenlab m-of-x --potential NAME --point X,Y,Z [--params JSON]
    greenlab agmon --potential NAME --from A --to B [--params JSON] [--dims N]
    greenlab schema

Exit codes: 0 when every asserted check passes, 1 when one fails, 2 on a
configuration error (schema violation, unmet suite prerequisite, unwritable
output).
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import math
import os
import platform
import sys
import threading
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from functools import cached_property
from importlib import metadata, resources
from pathlib import Path

import jsonschema
import numpy as np
import scipy

from . import auxfun, green, regularity
from .coefficients import (
    CASES,
    MATRIX_KINDS,
    POTENTIAL_KINDS,
    VECTOR_KINDS,
    CoefficientError,
    PotentialPreset,
    check_ellipticity,
    check_sign_conditions,
    preset_case,
)
from .forms import FormError, assemble, estimate_boundedness, estimate_coercivity
from .green import CheckRecord, EstimateReport, verdict
from .grid import DOMAIN_PRESETS, NDIM, Cutoff, GridError, GridFunction, make_grid, space_inclusion_scan, write_raw
from .solver import METHODS, PRECONDITIONERS, SolveOptions, SolverError, load_functional, solve_dirichlet, solve_variational

log = logging.getLogger("greenlab")

REPORT_VERSION = "1.0"
SUITES = ("agmon", "auxfun", "bmo", "caccioppoli", "coercivity", "degiorgi", "green-decay", "green-lq",
          "harnack", "holder", "representation", "space-demo", "symmetry", "weak-type")

# exact |{G > τ}|·τ³ for G = 1/(4π|x|): (4π/3)(4π)^{-3}
NEWTONIAN_WEAK_TYPE = (4.0 * math.pi / 3.0) / (4.0 * math.pi) ** 3

_POINT = {"type": "array", "items": {"type": "number"}, "minItems": 3, "maxItems": 3}


def _preset(kinds) -> dict:
    return {"type": "object", "required": ["kind"], "properties": {"kind": {"enum": list(kinds)}}}


SCHEMA: dict = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "greenlab scenario",
    "type": "object",
    "required": ["grid", "coefficients"],
    "additionalProperties": False,
    "properties": {
        "name": {"type": "string"},
        "description": {"type": "string"},
        "seed": {"type": "integer", "minimum": 0},
        "grid": {
            "type": "object",
            "required": ["dims", "h"],
            "additionalProperties": False,
            "properties": {
                "dims": {"oneOf": [{"type": "integer", "minimum": 9},
                                   {"type": "array", "items": {"type": "integer", "minimum": 9},
                                    "minItems": 3, "maxItems": 3}]},
                "h": {"type": "number", "exclusiveMinimum": 0},
                "origin": _POINT,
                "preset": {"enum": list(DOMAIN_PRESETS)},
                "params": {"type": "object"},
            },
        },
        "coefficients": {
            "type": "object",
            "required": ["case"],
            "additionalProperties": False,
            "properties": {
                "case": {"enum": list(CASES)},
                "N": {"type": "integer", "minimum": 1},
                "A": _preset(MATRIX_KINDS),
                "b": _preset(VECTOR_KINDS),
                "d": _preset(VECTOR_KINDS),
                "V": _preset(POTENTIAL_KINDS),
                "exponents": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {key: {"type": "number", "exclusiveMinimum": 0} for key in ("p", "s", "t")},
                },
                "coercivity": {"enum": ["sign", "small-drift", "none"]},
                "delta": {"type": "number", "minimum": 0},
                "V_matrix": {"type": "array", "items": {"type": "array", "items": {"type": "number"}}},
            },
        },
        "solver": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "rel_tol": {"type": "number", "exclusiveMinimum": 0, "maximum": 1e-4},
                "max_iter": {"type": ["integer", "null"], "minimum": 1},
                "method": {"enum": list(METHODS)},
                "preconditioner": {"enum": list(PRECONDITIONERS)},
            },
        },
        "sources": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["y"],
                "additionalProperties": False,
                "properties": {
                    "y": _POINT,
                    "k": {"type": "integer", "minimum": 0},
                    "rho": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0}, "minItems": 1},
                },
            },
        },
        "suites": {"type": "array", "items": {"enum": list(SUITES)}, "uniqueItems": True},
        "options": {
            "type": "object",
            "propertyNames": {"enum": list(SUITES)},
            "additionalProperties": {"type": "object"},
        },
        "output": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"dir": {"type": "string"}, "raw_fields": {"type": "boolean"}},
        },
    },
}


class ConfigError(ValueError):
    """Scenario is invalid or a suite prerequisite is not met (exit code 2)."""


def _pointer(path) -> str:
    return "/" + "/".join(str(p) for p in path) if path else "/"


def validate_scenario(data) -> dict:
    """Schema validation; the error names the offending key as a JSON pointer."""
    validator = jsonschema.Draft202012Validator(SCHEMA)
    errors = sorted(validator.iter_errors(data), key=lambda e: list(e.absolute_path))
    if errors:
        err = errors[0]
        raise ConfigError(f"scenario key {_pointer(err.absolute_path)}: {err.message}")
    suites = data.get("suites", [])
    case = data["coefficients"]["case"]
    N = data["coefficients"].get("N", 1)
    needs_potential = {"agmon", "auxfun"}
    for i, name in enumerate(suites):
        if name in needs_potential and case != "case3":
            raise ConfigError(f"scenario key /suites/{i}: suite '{name}' requires a case3 potential, got {case}")
        if name in ("caccioppoli", "degiorgi", "harnack", "bmo", "holder") and N != 1:
            raise ConfigError(f"scenario key /suites/{i}: suite '{name}' covers scalar equations only (N = 1)")
    return data


def scenario_hash(data: dict) -> str:
    canon = json.dumps(data, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()


def _version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "0+unknown"


def environment_block(threads: int) -> dict:
    return {"greenlab": _version(), "python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__, "platform": platform.system(), "threads": threads}


# ------------------------------------------------------------------ run context


@dataclass
class Context:
    """Objects shared by the suites, built on first use under a lock."""

    scenario: dict
    out_dir: Path
    seed: int
    lock: threading.RLock = field(default_factory=threading.RLock)

    def suite_seed(self, name: str) -> int:
        return (self.seed * 1_000_003 + zlib.crc32(name.encode())) % (2**32)

    def options(self, name: str) -> dict:
        return dict(self.scenario.get("options", {}).get(name, {}))

    @cached_property
    def spec(self):
        g = self.scenario["grid"]
        dims = g["dims"]
        dims = (dims,) * NDIM if isinstance(dims, int) else tuple(dims)
        return make_grid(dims, g["h"], g.get("origin"), g.get("preset", "full-box"), **g.get("params", {}))

    @cached_property
    def coefficients(self):
        cfg = dict(self.scenario["coefficients"])
        case = cfg.pop("case")
        return preset_case(self.spec, case, cfg)

    @property
    def case(self) -> str:
        return self.coefficients.case_tag

    @cached_property
    def opts(self) -> SolveOptions:
        return SolveOptions(**self.scenario.get("solver", {}))

    @cached_property
    def profile(self):
        return auxfun.PotentialProfile.from_coefficients(self.coefficients)

    @cached_property
    def m(self) -> GridFunction:
        return auxfun.m_field(self.profile)

    @cached_property
    def form(self):
        kind = {"case1": "Y12", "case2": "W12", "case3": "WV12"}[self.case]
        m = self.m.values[0] if kind == "WV12" else None
        return assemble(self.spec, self.coefficients, kind, m_field=m)

    @cached_property
    def sources(self) -> list[dict]:
        raw = self.scenario.get("sources") or [{"y": list(self.spec.center)}]
        return [{"y": tuple(self.spec.snap(s["y"])), "k": int(s.get("k", 0)),
                 "rho": [float(r) for r in s.get("rho", [2 * self.spec.h])]} for s in raw]

    def dirichlet(self, src: dict) -> green.GreenField:
        key = ("dirichlet", src["y"], src["k"], src["rho"][-1])
        with self.lock:
            cache = self.__dict__.setdefault("_fields", {})
            if key not in cache:
                cache[key] = green.averaged_green(self.form, src["y"], src["k"], src["rho"][-1], self.opts)
            return cache[key]

    def multiscale(self, src: dict, factors) -> green.MultiscaleField:
        key = ("multiscale", src["y"], src["k"], tuple(factors))
        with self.lock:
            cache = self.__dict__.setdefault("_fields", {})
            if key not in cache:
                cache[key] = green.multiscale_whole_space(self.coefficients, src["y"], src["k"], tuple(factors),
                                                          opts=self.opts)
            return cache[key]

    @cached_property
    def landscape(self) -> GridFunction:
        """u with Lu = 1 and zero trace: a positive solution with a constant source."""
        return solve_variational(self.form, load_functional(self.unit_source), self.opts)

    @cached_property
    def unit_source(self) -> GridFunction:
        return GridFunction(self.spec, self.spec.omega_mask.astype(float))

    def csv(self, name: str, header: list[str], rows) -> Path:
        path = self.out_dir / f"{name}.csv"
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for row in rows:
                w.writerow([_fmt(v) for v in row])
        return path

    def raw(self, name: str, u: GridFunction) -> None:
        if self.scenario.get("output", {}).get("raw_fields", False):
            write_raw(u, self.out_dir / f"{name}.raw")


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.12g}"
    if isinstance(v, (list, tuple, np.ndarray)):
        return " ".join(_fmt(x) for x in v)
    return str(v)


def _src_label(src: dict) -> str:
    return "y=(" + ",".join(f"{c:.6g}" for c in src["y"]) + f"),k={src['k']}"


# ------------------------------------------------------------------ suites


def suite_coercivity(ctx: Context, rep: EstimateReport) -> None:
    c = ctx.coefficients
    ell = check_ellipticity(c, seed=ctx.suite_seed("ellipticity"))
    rep.add(CheckRecord("ellipticity", "lambda |xi|^2 <= A xi . xi, |A| <= Lambda", ell.lambda_est, "> 0", None,
                        verdict(ell.ok), details={"Lambda": ell.Lambda_est}))
    gam = estimate_coercivity(ctx.form, seed=ctx.suite_seed("coercivity"))
    rep.add(CheckRecord("coercivity", f"B[u,u] >= gamma ||u||^2 in {ctx.form.norm_kind}", gam.gamma_est, "> 0",
                        None, verdict(gam.coercive), details={"converged": gam.converged}))
    bnd = estimate_boundedness(ctx.form, seed=ctx.suite_seed("boundedness"))
    rep.add(CheckRecord("boundedness", f"|B[u,v]| <= Gamma ||u|| ||v|| in {ctx.form.norm_kind}", bnd.Gamma_est,
                        None, None, "report", details={"converged": bnd.converged, "iterations": bnd.iterations}))
    if c.N == 1:
        signs = check_sign_conditions(c)
        rep.add(CheckRecord("sign-conditions", "V - div b, V - div d, V - div(b+d)/2 minima",
                            signs["V-half_div_bd"]["min"], None, None, "report", details=signs))
    ctx.csv("coercivity", ["quantity", "value"],
            [("lambda", ell.lambda_est), ("Lambda", ell.Lambda_est), ("gamma", gam.gamma_est),
             ("Gamma", bnd.Gamma_est)])


def suite_green_decay(ctx: Context, rep: EstimateReport) -> None:
    opt = ctx.options("green-decay")
    proxy = opt.get("proxy", "multiscale")
    rows = []
    for src in ctx.sources:
        if proxy == "dirichlet":
            fld = ctx.dirichlet(src)
        elif proxy == "whole-space":
            fld = green.whole_space_green(ctx.coefficients, src["y"], src["k"], src["rho"][-1], ctx.opts)
        elif proxy == "multiscale":
            fld = ctx.multiscale(src, opt.get("factors", (1, 5, 25)))
        else:
            raise ConfigError(f"scenario key /options/green-decay/proxy: unknown proxy '{proxy}'")
        rec = green.decay_profile(fld, shells=int(opt.get("shells", 5)), case_tag=ctx.case)
        rec.details["source"] = _src_label(src)
        rep.add(rec)
        edges = rec.details["edges"]
        rows += [(_src_label(src), a, b, s) for a, b, s in zip(edges[:-1], edges[1:], rec.details["shell_sup"])]
        laplacian = ctx.case == "case1" and ctx.scenario["coefficients"].get("A", {"kind": "identity"}) == {"kind": "identity"}
        if laplacian and proxy != "dirichlet":
            finest = fld.finest if isinstance(fld, green.MultiscaleField) else fld
            nrec = green.newtonian_check(finest)
            nrec.details["source"] = _src_label(src)
            rep.add(nrec)
        ctx.raw(f"green-{len(rows)}", (fld.finest if isinstance(fld, green.MultiscaleField) else fld).values)
    ctx.csv("green-decay", ["source", "r_in", "r_out", "shell_sup"], rows)


def suite_green_lq(ctx: Context, rep: EstimateReport) -> None:
    rows = []
    for src in ctx.sources:
        fld = ctx.dirichlet(src)
        rec = green.lq_profiles(fld)
        rec.details["source"] = _src_label(src)
        rep.add(rec)
        keys = [k for k in rec.details if k not in ("radii", "source")]
        for i, r in enumerate(rec.details["radii"]):
            rows.append([_src_label(src), r] + [rec.details[k][i] for k in keys])
    ctx.csv("green-lq", ["source", "radius"] + keys, rows)


def suite_weak_type(ctx: Context, rep: EstimateReport) -> None:
    opt = ctx.options("weak-type")
    laplacian = ctx.case == "case1" and ctx.scenario["coefficients"].get("A", {"kind": "identity"}) == {"kind": "identity"}
    rows = []
    for src in ctx.sources:
        fld = ctx.multiscale(src, opt.get("factors", (1, 5, 25)))
        rec = green.weak_type_profile(fld, expected=NEWTONIAN_WEAK_TYPE if laplacian else None)
        rec.details["source"] = _src_label(src)
        rep.add(rec)
        d = rec.details
        rows += [(_src_label(src), t, p, gt, gp)
                 for t, p, gt, gp in zip(d["taus"], d["product"], d["gradient_taus"], d["gradient_product"])]
    ctx.csv("weak-type", ["source", "tau", "measure_times_tau3", "gradient_tau", "gradient_measure_times_tau1.5"],
            rows)


def _interior_points(ctx: Context, count: int, seed: int, margin_cells: int = 4) -> list[tuple]:
    spec = ctx.spec
    rng = np.random.default_rng(seed)
    dist = spec.distance_to_boundary()
    nodes = np.argwhere(spec.omega_mask & (dist > (margin_cells + 2) * spec.h))
    if len(nodes) == 0:
        raise ConfigError("scenario key /grid: grid too small for interior sample points")
    pick = nodes[rng.choice(len(nodes), size=min(count, len(nodes)), replace=False)]
    return [tuple(spec.position(tuple(p))) for p in pick]


def suite_symmetry(ctx: Context, rep: EstimateReport) -> None:
    opt = ctx.options("symmetry")
    spec = ctx.spec
    seed = ctx.suite_seed("symmetry")
    pts = _interior_points(ctx, 200, seed)
    rng = np.random.default_rng(seed + 1)
    P = np.asarray(pts)
    ia, ib = np.triu_indices(len(P), 1)
    far = np.linalg.norm(P[ia] - P[ib], axis=1) >= 8 * spec.h
    want = int(opt.get("pairs", 10))
    if far.sum() < want:
        raise ConfigError(f"scenario key /grid: only {int(far.sum())} interior pairs are 8h apart, need {want}")
    pick = rng.choice(np.flatnonzero(far), size=want, replace=False)
    pairs = [(pts[ia[k]], pts[ib[k]]) for k in pick]
    method = opt.get("method", "direct")
    opts = SolveOptions(rel_tol=ctx.opts.rel_tol, max_iter=ctx.opts.max_iter, method=method,
                        preconditioner=ctx.opts.preconditioner)
    rec = green.symmetry_check(ctx.form, pairs, opts=opts)
    rep.add(rec)
    ctx.csv("symmetry", ["x", "y", "relative_difference"],
            [(x, y, r) for (x, y), r in zip(pairs, rec.details["per_pair"])])


def suite_representation(ctx: Context, rep: EstimateReport) -> None:
    opt = ctx.options("representation")
    spec = ctx.spec
    width = float(opt.get("width", 0.15 * spec.extent.min()))
    c0 = np.asarray(ctx.sources[0]["y"])
    f = GridFunction.from_function(spec, lambda p: np.exp(-np.sum((p - c0) ** 2, axis=-1) / width**2))
    f = GridFunction(spec, f.values * spec.omega_mask)
    pts = _interior_points(ctx, int(opt.get("points", 20)), ctx.suite_seed("representation"))
    rec = green.representation_check(ctx.form, f, pts, opts=ctx.opts)
    rep.add(rec)
    ctx.csv("representation", ["x", "component", "direct", "representation"], rec.details["samples"])


def _dyadic_R0(ctx: Context) -> tuple[float, float]:
    spec = ctx.spec
    half = 0.5 * float(spec.extent.min())
    cells = 1
    while 2 * cells * spec.h <= 0.8 * half:
        cells *= 2
    return cells * spec.h, max(cells / 4, 1.0)


def suite_holder(ctx: Context, rep: EstimateReport) -> None:
    spec = ctx.spec
    rng = np.random.default_rng(ctx.suite_seed("holder"))
    a = rng.normal(size=NDIM)
    g = GridFunction.from_function(spec, lambda p: 1.0 + (p - spec.center) @ a)
    u = solve_dirichlet(ctx.form, g, None, ctx.opts)
    R0, cells = _dyadic_R0(ctx)
    rec = regularity.holder_exponent(ctx.form, u, R0, tuple(spec.center), min_radius_cells=cells,
                                     seed=ctx.suite_seed("holder-pairs"), opts=ctx.opts)
    rep.add(rec)
    rows = [("dirichlet-data", r, w) for r, w in zip(rec.details.get("radii", []), rec.details.get("oscillation", []))]
    src = ctx.sources[0]
    fld = ctx.dirichlet(src)
    R0g = float(min(fld.trusted_radius, spec.extent.min()) / 4.0)
    try:
        mod = green.holder_modulus(fld, R0g, seed=ctx.suite_seed("holder-green"))
        rep.add(mod)
        rows += [("green", r, w) for r, w in zip(mod.details.get("deltas", []), mod.details.get("oscillation", []))]
    except GridError as exc:
        rep.add(CheckRecord("holder-modulus", "Holder modulus of Gamma away from the pole", math.nan, None, None,
                            "report", details={"skipped": str(exc)}))
    ctx.csv("holder", ["field", "radius", "oscillation"], rows)


def suite_caccioppoli(ctx: Context, rep: EstimateReport) -> None:
    h = ctx.spec.h
    src = ctx.sources[0]
    fld = ctx.dirichlet(src)
    cuts = [Cutoff(src["y"], a * h, 2 * a * h, "complement") for a in (2, 4, 8)]
    rec = regularity.caccioppoli_check(ctx.form, fld.values, cuts, opts=ctx.opts)
    rep.add(rec)
    ctx.csv("caccioppoli", ["r", "R", "lhs", "rhs_energy", "rhs_source", "ratio"],
            [(s["r"], s["R"], s["lhs"], s["rhs_energy"], s["rhs_source"], s["ratio"]) for s in rec.details["scales"]])


def suite_degiorgi(ctx: Context, rep: EstimateReport) -> None:
    spec = ctx.spec
    opt = ctx.options("degiorgi")
    runs = int(opt.get("runs", 3))
    rng = np.random.default_rng(ctx.suite_seed("degiorgi"))
    half = 0.5 * float(spec.extent.min())
    signs = check_sign_conditions(ctx.coefficients)
    coercive = signs["V-div_b"]["min"] >= 0.0
    rows = []
    ctr = tuple(spec.center)
    for i in range(runs):
        a = rng.normal(size=NDIM)
        y = spec.center + rng.uniform(-0.3, 0.3, NDIM) * half
        width = rng.uniform(0.1, 0.3) * half
        amp = rng.uniform(0.1, 1.0)
        f = GridFunction.from_function(spec, lambda p: amp * np.exp(-np.sum((p - y) ** 2, axis=-1) / width**2))
        g = GridFunction.from_function(spec, lambda p: 0.5 + (p - spec.center) @ a)
        u = solve_dirichlet(ctx.form, g, f, ctx.opts)
        R = float(rng.uniform(0.3, 0.6) * half)
        center = tuple(spec.center + rng.uniform(-0.2, 0.2, NDIM) * half)
        if coercive:
            K, trace = regularity.degiorgi_sup_bound(ctx.form, u, f, R=R, center=center, opts=ctx.opts)
            rec = regularity.degiorgi_record(K, trace)
            rec.id = f"degiorgi-{i}"
            rep.add(rec)
            trace.to_json(ctx.out_dir / f"degiorgi-trace-{i}.json")
            rows += [(i, j, k, r, m, e) for j, (k, r, m, e) in
                     enumerate(zip(trace.levels, trace.radii, trace.masses, trace.energies))]
        if i == 0:
            mrec, traces = regularity.moser_bound_general(ctx.form, u, f, R=0.25 * half, center=ctr, opts=ctx.opts)
            rep.add(mrec)
    if not coercive:
        rep.add(CheckRecord("degiorgi", "coercive local boundedness", math.nan, None, None, "report",
                            details={"skipped": "sign condition V - div b >= 0 fails", "signs": signs}))
    ctx.csv("degiorgi", ["run", "i", "k_i", "r_i", "mass", "energy"], rows)


def suite_harnack(ctx: Context, rep: EstimateReport) -> None:
    spec = ctx.spec
    half = 0.5 * float(spec.extent.min())
    R = float(ctx.options("harnack").get("R", 0.25 * half))
    u = ctx.landscape
    rec = regularity.harnack_ratio(ctx.form, u, ctx.unit_source, R=R, center=tuple(spec.center), scales=(1.0, 2.0),
                                   opts=ctx.opts)
    rep.add(rec)
    wh = regularity.weak_harnack(ctx.form, u, None, R=2 * R, center=tuple(spec.center),
                                 seed=ctx.suite_seed("weak-harnack"), opts=ctx.opts)
    rep.add(wh)
    ctx.csv("harnack", ["R", "sup_quarter", "inf_half", "f_term", "ratio"],
            [(s["R"], s["sup"], s["inf"], s["f_term"], s["ratio"]) for s in rec.details["scales"]])


def suite_bmo(ctx: Context, rep: EstimateReport) -> None:
    spec = ctx.spec
    half = 0.5 * float(spec.extent.min())
    opt = ctx.options("bmo")
    rec = regularity.bmo_crossover_check(ctx.form, ctx.landscape, None, R=float(opt.get("R", 0.5 * half)),
                                         center=tuple(spec.center), ball_samples=int(opt.get("balls", 40)),
                                         seed=ctx.suite_seed("bmo"), opts=ctx.opts)
    rep.add(rec)
    ctx.csv("bmo", ["q", "worst_product"], zip(rec.details["qs"], rec.details["worst_product"]))


def suite_auxfun(ctx: Context, rep: EstimateReport) -> None:
    prof = ctx.profile
    m = ctx.m
    res = auxfun.psi_residual(prof, m)
    rep.add(CheckRecord("psi-residual", "psi(x, 1/m(x,V)) = 1", res, 0.0, 1e-6, verdict(res <= 1e-6)))
    seed = ctx.suite_seed("auxfun")
    pot = ctx.coefficients.potential
    origin = pot.kind == "radial-power" and np.allclose(pot.params.get("center", (0, 0, 0)), 0)
    balls = (auxfun.sample_balls(ctx.spec, 200, seed, origin_centered=True)
             if origin and ctx.spec.is_inside((0.0, 0.0, 0.0)) else 200)
    p = float(ctx.options("auxfun").get("p", 2.0))
    bp = auxfun.bp_constant(prof, p, balls, seed)
    rep.add(CheckRecord("reverse-holder", f"B_{p:g} constant of V", bp.constant, None, None, "report",
                        details={"worst_ball": bp.worst_ball, "origin_centered": bool(origin)}))
    fp = auxfun.fefferman_phong_check(prof, 50, m, seed)
    rep.add(CheckRecord("fefferman-phong", "int u^2 m^2 <= C (int |Du|^2 + int V u^2)", fp.empirical_C, None, None,
                        verdict(math.isfinite(fp.empirical_C)), details={"skipped": fp.skipped}))
    comp = auxfun.verify_m_comparability(prof, 500, seed, m_at=None)
    rep.add(CheckRecord("m-comparability", "m(y) <= C (1 + |x-y| m(x))^k0 m(x)", comp.k0, None, None,
                        verdict(comp.bounded and comp.a_holds),
                        details={"C": comp.C, "c": comp.c, "C_prime": comp.C_prime, "C_prime_bound": comp.C_prime_bound}))
    pts = _interior_points(ctx, 20, seed)
    auxfun.write_m_csv(ctx.out_dir / "auxfun.csv", prof, pts)
    ctx.raw("m-field", m)


def suite_agmon(ctx: Context, rep: EstimateReport) -> None:
    graph = auxfun.AgmonGraph.build(ctx.profile, ctx.m)
    src = ctx.sources[0]
    dist = graph.distances_from(src["y"])
    fld = ctx.dirichlet(src)
    rec = green.agmon_decay_check(fld, dist)
    rep.add(rec)
    pts = _interior_points(ctx, 20, ctx.suite_seed("agmon"))
    auxfun.write_agmon_csv(ctx.out_dir / "agmon.csv",
                           [(p, src["y"], float(dist.values[(0,) + ctx.spec.nearest_node(p)])) for p in pts])


def suite_space_demo(ctx: Context, rep: EstimateReport) -> None:
    opt = ctx.options("space-demo")
    rows = space_inclusion_scan(h=float(opt.get("h", 0.125)))
    l2 = [r["L2"] for r in rows]
    ys = [r["Y_sum"] for r in rows]
    growing = all(b > a for a, b in zip(l2, l2[1:]))
    change = abs(ys[-1] - ys[-2]) / ys[-2]
    rep.add(CheckRecord("space-inclusion", "f in Y^{1,2} but not in L^2", change, 0.0, 0.1,
                        verdict(growing and change <= 0.1), details={"L2": l2, "Y_sum": ys, "L2_increasing": growing}))
    ctx.csv("space-demo", ["k", "side", "L2", "L6", "DL2", "L6_plus_DL2"],
            [(r["k"], r["side"], r["L2"], r["L6"], r["DL2"], r["Y_sum"]) for r in rows])


RUNNERS = {
    "agmon": suite_agmon, "auxfun": suite_auxfun, "bmo": suite_bmo, "caccioppoli": suite_caccioppoli,
    "coercivity": suite_coercivity, "degiorgi": suite_degiorgi, "green-decay": suite_green_decay,
    "green-lq": suite_green_lq, "harnack": suite_harnack, "holder": suite_holder,
    "representation": suite_representation, "space-demo": suite_space_demo, "symmetry": suite_symmetry,
    "weak-type": suite_weak_type,
}

_CONFIG_ERRORS = (ConfigError, GridError, CoefficientError, FormError, auxfun.AuxError)


def _run_suite(ctx: Context, name: str) -> EstimateReport:
    rep = EstimateReport(name)
    try:
        RUNNERS[name](ctx, rep)
    except (regularity.RegularityError, SolverError) as exc:
        rep.add(CheckRecord(f"{name}-error", "suite execution", math.nan, None, None, "fail",
                            details={"error": str(exc)}))
    return rep


def _prepare(ctx: Context, suites) -> None:
    """Build shared objects in dependency order: coefficients, auxiliary fields, forms."""
    _ = ctx.spec, ctx.coefficients, ctx.opts, ctx.sources
    if ctx.case == "case3":
        _ = ctx.m
    if any(s not in ("space-demo", "auxfun") for s in suites):
        _ = ctx.form
    if any(s in ("harnack", "bmo") for s in suites):
        _ = ctx.landscape


def emit_report(reports: list[EstimateReport], out_dir: Path, scenario: dict, threads: int) -> Path:
    """Write report.json (suites sorted by name) and return its path."""
    doc = {
        "version": REPORT_VERSION,
        "scenario-hash": scenario_hash(scenario),
        "environment": environment_block(threads),
        "timestamp": datetime.now(timezone.utc).isoformat(timespec="seconds"),
        "suites": [r.to_dict() for r in sorted(reports, key=lambda r: r.suite)],
    }
    path = out_dir / "report.json"
    try:
        path.write_text(json.dumps(doc, indent=2, sort_keys=True, allow_nan=False) + "\n")
    except OSError as exc:
        raise ConfigError(f"cannot write {path}: {exc}") from exc
    return path


def run_scenario(path, out: str | Path | None = None, threads: int | None = None, seed: int | None = None) -> int:
    """Run a scenario file; returns the exit code."""
    try:
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read scenario {path}: {exc}") from exc
        validate_scenario(data)
        if seed is not None:
            data = {**data, "seed": int(seed)}
        threads = threads or int(os.environ.get("GREENLAB_THREADS", "1") or 1)
        if threads < 1:
            raise ConfigError("--threads must be positive")
        out_dir = Path(out or data.get("output", {}).get("dir", "greenlab-report"))
        try:
            out_dir.mkdir(parents=True, exist_ok=True)
            probe = out_dir / ".write-test"
            probe.write_text("")
            probe.unlink()
        except OSError as exc:
            raise ConfigError(f"output directory {out_dir} is not writable: {exc}") from exc
        ctx = Context(data, out_dir, int(data.get("seed", 0)))
        suites = sorted(set(data.get("suites", [])))
        _prepare(ctx, suites)
        if threads > 1 and len(suites) > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                reports = list(pool.map(lambda s: _run_suite(ctx, s), suites))
        else:
            reports = [_run_suite(ctx, s) for s in suites]
        emit_report(reports, out_dir, data, threads)
    except _CONFIG_ERRORS as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    failed = [c.id for r in reports for c in r.checks if c.verdict == "fail"]
    for r in reports:
        for c in r.checks:
            log.info("%s/%s: %s", r.suite, c.id, c.verdict)
    if failed:
        print(f"failed checks: {', '.join(failed)}", file=sys.stderr)
        return 1
    return 0


# ------------------------------------------------------------------ utilities


def _parse_point(text: str) -> tuple[float, float, float]:
    try:
        vals = tuple(float(v) for v in text.split(","))
    except ValueError as exc:
        raise ConfigError(f"point '{text}' is not X,Y,Z") from exc
    if len(vals) != NDIM:
        raise ConfigError(f"point '{text}' needs {NDIM} coordinates")
    return vals


def _potential(name: str, params: str | None) -> PotentialPreset:
    try:
        extra = json.loads(params) if params else {}
    except json.JSONDecodeError as exc:
        raise ConfigError(f"--params is not JSON: {exc}") from exc
    try:
        return PotentialPreset(name, extra)
    except CoefficientError as exc:
        raise ConfigError(str(exc)) from exc


def _cover_grid(points, dims: int):
    """Cubic grid around the points with the first point on a lattice node."""
    pts = np.asarray(points, dtype=float)
    center = 0.5 * (pts.min(axis=0) + pts.max(axis=0))
    span = float(np.max(pts.max(axis=0) - pts.min(axis=0)))
    side = max(2.0, 1.5 * span + 1.0)
    dims += 1 - dims % 2
    h = side / (dims - 1)
    origin = center - 0.5 * side
    origin = pts[0] - h * np.round((pts[0] - origin) / h)
    return make_grid((dims,) * NDIM, h, tuple(origin))


def cmd_m_of_x(args) -> int:
    pot = _potential(args.potential, args.params)
    x = _parse_point(args.point)
    spec = _cover_grid([x], 17)
    prof = auxfun.PotentialProfile.from_preset(spec, pot)
    m = auxfun.m_of_x(prof, x)
    res = abs(float(auxfun.psi(prof, np.asarray(x)[None], np.array([1.0 / m]))[0]) - 1.0)
    print(json.dumps({"potential": args.potential, "point": list(x), "m": m, "psi_residual": res}))
    return 0


def cmd_agmon(args) -> int:
    pot = _potential(args.potential, args.params)
    a, b = _parse_point(getattr(args, "from")), _parse_point(args.to)
    spec = _cover_grid([a, b], args.dims)
    prof = auxfun.PotentialProfile.from_preset(spec, pot)
    graph = auxfun.AgmonGraph.build(prof)
    d = auxfun.agmon_distance(graph, a, b)
    print(json.dumps({"potential": args.potential, "from": list(a), "to": list(b), "d": d,
                      "from_node": spec.snap(a).tolist(), "to_node": spec.snap(b).tolist(),
                      "grid": {"dims": list(spec.dims), "h": spec.h}}))
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="greenlab", description="Green-matrix estimate laboratory")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run a scenario file")
    run.add_argument("scenario")
    run.add_argument("--out")
    run.add_argument("--threads", type=int)
    run.add_argument("--seed", type=int)
    mx = sub.add_parser("m-of-x", help="evaluate m(x, V) for a potential preset")
    mx.add_argument("--potential", required=True, choices=POTENTIAL_KINDS)
    mx.add_argument("--point", required=True)
    mx.add_argument("--params")
    ag = sub.add_parser("agmon", help="Agmon distance between two points")
    ag.add_argument("--potential", required=True, choices=POTENTIAL_KINDS)
    ag.add_argument("--from", required=True)
    ag.add_argument("--to", required=True)
    ag.add_argument("--params")
    ag.add_argument("--dims", type=int, default=41)
    sub.add_parser("schema", help="print the scenario JSON schema")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        if args.command == "run":
            return run_scenario(args.scenario, args.out, args.threads, args.seed)
        if args.command == "schema":
            print(json.dumps(SCHEMA, indent=2))
            return 0
        if args.command == "m-of-x":
            return cmd_m_of_x(args)
        return cmd_agmon(args)
    except _CONFIG_ERRORS as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2


def shipped_scenario(name: str = "laplacian-decay") -> Path:
    """Path of a scenario file bundled with the package."""
    return Path(str(resources.files("greenlab") / "scenarios" / f"{name}.json"))


if __name__ == "__main__":
    sys.exit(main())
