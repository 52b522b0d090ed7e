"""De Giorgi-Nash-Moser verifiers for scalar equations on the grid.

Every check takes an assembled form, a nodal field ``u`` and optional data,
gates ``u`` through the full-rows residual of the form (a solution, sub- or
supersolution test against nonnegative nodal test functions), and measures
the quantities of the corresponding inequality by h³ node quadrature.

Truncations (u - k)₊ and (u + k)^{-q} are formed nodewise; on a grid these
are admissible test functions without further argument.
"""

from __future__ import annotations

import json
import math
import weakref
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .coefficients import check_sign_conditions
from .forms import AssembledForm, DifferenceOperators, residual_operator
from .green import CheckRecord, _fit_slope, _jsonable, verdict
from .grid import NDIM, Cutoff, GridFunction, GridSpec, discrete_gradient
from .solver import SolveOptions

# sharp constant in ||u||_{2n/(n-2)} <= c_n ||Du||_2 for n = 3
SOBOLEV_CONSTANT = 1.0 / math.sqrt(3.0 * math.pi) * (math.gamma(3.0) / math.gamma(1.5)) ** (1.0 / 3.0)

DEGIORGI_STEPS = 20
C0_CEILING = 2.0**16
SUP_SLACK = 1e-8


class RegularityError(ValueError):
    """Refused input: wrong system size, failed residual gate, degenerate data."""


# ------------------------------------------------------------------ helpers


def _scalar(form: AssembledForm) -> None:
    if form.N != 1:
        raise RegularityError("regularity checks cover scalar equations (N = 1) only")
    if form.coefficients is None:
        raise RegularityError("form carries no coefficients")


def _field(spec: GridSpec, u) -> np.ndarray:
    vals = u.values if isinstance(u, GridFunction) else np.asarray(u, dtype=float)
    if vals.shape == spec.shape:
        vals = vals[None]
    if vals.shape != (1,) + spec.shape:
        raise RegularityError(f"field has shape {vals.shape}, expected (1,) + {spec.shape}")
    return vals


def _data(spec: GridSpec, f) -> np.ndarray:
    if f is None:
        return np.zeros(spec.shape)
    return _field(spec, f)[0]


def _ball_nodes(spec: GridSpec, center, r: float) -> np.ndarray:
    return spec.distance_from(center) <= r * (1.0 + 1e-12)


def _lnorm(vals: np.ndarray, w: np.ndarray, q: float) -> float:
    a = np.abs(vals)
    if math.isinf(q):
        sel = w > 0
        return float(a[sel].max()) if sel.any() else 0.0
    return float(np.sum(w * a**q) ** (1.0 / q))


def _scale_power(R: float, a: float, n_over: float) -> float:
    """R^{a - n/exponent}, with n/inf = 0."""
    return R ** (a - (0.0 if math.isinf(n_over) else NDIM / n_over))


@dataclass(frozen=True)
class ResidualGate:
    """Row residuals of B[u, ·] - F on the test dofs inside a region."""

    mode: str
    max_violation: float
    scale: float
    tolerance: float
    rows: int

    @property
    def relative(self) -> float:
        return self.max_violation / self.scale if self.scale > 0 else 0.0

    @property
    def ok(self) -> bool:
        return self.relative <= self.tolerance


def residual_gate(form: AssembledForm, u, f=None, region: np.ndarray | None = None, mode: str = "solution",
                  g=None, opts: SolveOptions | None = None) -> ResidualGate:
    """Test Lu = f (or <=, >=) against nodal test functions supported in ``region``.

    The functional is φ ↦ ∫ f φ - ∫ g·Dφ; the relative violation is taken
    against max_rows(|B|·|u| + |F|). Tolerance is 10³·rel_tol.
    """
    if mode not in ("solution", "subsolution", "supersolution"):
        raise RegularityError(f"unknown gate mode '{mode}'")
    opts = opts or SolveOptions()
    spec = form.spec
    R = _full_rows(form)
    uv = _field(spec, u).ravel()
    h3 = spec.h**3
    load = (h3 * _data(spec, f)).ravel()[spec.dof_nodes]
    if g is not None:
        gv = np.asarray(g.values if isinstance(g, GridFunction) else g, dtype=float)
        ops = DifferenceOperators.build(spec)
        div = sum(ops.centered[a].T @ (h3 * gv[a].ravel()) for a in range(NDIM))
        load = load - np.asarray(div)[spec.dof_nodes]
    res = R @ uv - load
    scale_rows = abs(R) @ np.abs(uv) + np.abs(load)
    sel = np.ones(len(res), dtype=bool) if region is None else region.ravel()[spec.dof_nodes]
    if not sel.any():
        raise RegularityError("residual gate region contains no test dofs")
    r = res[sel]
    if mode == "solution":
        viol = float(np.max(np.abs(r)))
    elif mode == "subsolution":
        viol = float(max(np.max(r), 0.0))
    else:
        viol = float(max(np.max(-r), 0.0))
    return ResidualGate(mode, viol, float(np.max(scale_rows[sel])), 1e3 * opts.rel_tol, int(sel.sum()))


_ROWS_CACHE: "weakref.WeakKeyDictionary[AssembledForm, object]" = weakref.WeakKeyDictionary()


def _full_rows(form: AssembledForm):
    R = _ROWS_CACHE.get(form)
    if R is None:
        c = form.coefficients
        if form.meta.get("adjoint"):
            # the transposed matrix is the form with Aᵀ and b, d exchanged
            c = replace(c, A=np.swapaxes(np.swapaxes(c.A, 0, 1), 2, 3), b=c.d, d=c.b, recipe=None)
        R = residual_operator(form.spec, c)
        _ROWS_CACHE[form] = R
    return R


def _require(gate: ResidualGate, what: str) -> None:
    if not gate.ok:
        raise RegularityError(f"u is not a {gate.mode} ({what}): relative residual {gate.relative:.3e} "
                              f"> {gate.tolerance:.1e}")


# ------------------------------------------------------------------ Caccioppoli


def caccioppoli_ratio(form: AssembledForm, u, cutoff: Cutoff, f=None, opts: SolveOptions | None = None) -> dict:
    """LHS = ∫|Du|²ζ², RHS₁ = ∫|u|²|Dζ|², RHS₂ = |∫ f u ζ²| for one cutoff."""
    spec = form.spec
    vals = _field(spec, u)
    zeta = cutoff.field(spec).values[0]
    # nodes on the inner sphere carry rounding-level ζ; they are not in the support
    _require(residual_gate(form, vals, f, zeta > 1e-12, "solution", opts=opts), "on the cutoff support")
    w = spec.node_weights
    du2 = discrete_gradient(GridFunction(spec, vals)).values
    du2 = np.sum(du2**2, axis=0)
    dz2 = np.sum(discrete_gradient(GridFunction(spec, zeta)).values ** 2, axis=0)
    lhs = float(np.sum(w * du2 * zeta**2))
    rhs1 = float(np.sum(w * vals[0] ** 2 * dz2))
    rhs2 = abs(float(np.sum(w * _data(spec, f) * vals[0] * zeta**2)))
    rhs = rhs1 + rhs2
    if rhs == 0.0:
        ratio = 0.0 if lhs == 0.0 else math.inf
    else:
        ratio = lhs / rhs
    return {"r": cutoff.r, "R": cutoff.R, "lhs": lhs, "rhs_energy": rhs1, "rhs_source": rhs2, "ratio": ratio}


def caccioppoli_check(form: AssembledForm, u, cutoff: Cutoff | Sequence[Cutoff], f=None,
                      opts: SolveOptions | None = None, spread_tol: float = 4.0) -> CheckRecord:
    """Caccioppoli ratios LHS/(RHS₁+RHS₂) at one or several cutoff scales.

    With several cutoffs the verdict asks that max/min of the finite nonzero
    ratios stays within ``spread_tol``.
    """
    _scalar(form)
    cutoffs = [cutoff] if isinstance(cutoff, Cutoff) else list(cutoff)
    rows = [caccioppoli_ratio(form, u, c, f, opts) for c in cutoffs]
    ratios = np.array([r["ratio"] for r in rows])
    if np.any(np.isinf(ratios)):
        return CheckRecord("caccioppoli", "interior energy bounded by cutoff energy", math.inf, None, spread_tol,
                           "fail", details={"scales": rows})
    live = ratios[ratios > 0]
    spread = float(live.max() / live.min()) if live.size else 1.0
    ok = verdict(spread <= spread_tol) if len(rows) > 1 else "report"
    return CheckRecord("caccioppoli", "interior energy bounded by cutoff energy", float(ratios.max()), None,
                       spread_tol, ok, details={"scales": rows, "spread": spread})


# ------------------------------------------------------------------ level-set iterations


@dataclass
class IterationTrace:
    """One certified (or refused) run of the truncated-energy iteration."""

    variant: str
    center: tuple[float, float, float]
    R: float
    levels: list[float]
    radii: list[float]
    masses: list[float]
    energies: list[float]
    K: float
    mu: float
    eps: tuple[float, ...]
    C0: float
    certified: bool
    k0: float = 0.0
    sup_half: float = math.nan
    violations: int = 0
    extra: dict = field(default_factory=dict)

    @property
    def bound(self) -> float:
        """The certified upper bound of u⁺ on Ω_{R/2}: k₀ + K."""
        return self.k0 + self.K

    def to_dict(self) -> dict:
        return _jsonable(asdict(self))

    def to_json(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        return path


class _Truncation:
    """Cached distances and values on Ω_R for repeated φ(k, r) evaluation."""

    def __init__(self, spec: GridSpec, u: np.ndarray, center, R: float) -> None:
        dist = spec.distance_from(center)
        sel = (dist <= R * (1 + 1e-12)) & (spec.node_weights > 0)
        self.dist = dist[sel]
        self.u = u[sel]
        self.w = spec.node_weights[sel]

    def phi(self, k: float, r: float) -> float:
        inside = self.dist <= r * (1 + 1e-12)
        v = np.maximum(self.u[inside] - k, 0.0)
        return float(math.sqrt(np.sum(self.w[inside] * v * v)))

    def mass(self, k: float, r: float) -> float:
        inside = (self.dist <= r * (1 + 1e-12)) & (self.u >= k)
        return float(np.sum(self.w[inside]))

    def lq(self, q: float, r: float) -> float:
        inside = self.dist <= r * (1 + 1e-12)
        return _lnorm(np.maximum(self.u[inside], 0.0), self.w[inside], q)

    def sup(self, r: float) -> float:
        inside = self.dist <= r * (1 + 1e-12)
        return float(np.max(np.maximum(self.u[inside], 0.0))) if inside.any() else 0.0


def _smallest_mu(eps: Sequence[float], offset: float) -> float:
    """Smallest μ > 1 with μ^ε >= 2^{offset+ε} for every ε."""
    return float(max(2.0 ** ((offset + e) / e) for e in eps))


def _run(tr: _Truncation, R: float, K: float, k0: float, steps: int) -> tuple[list, list, list]:
    levels, radii, energies = [], [], []
    for i in range(steps + 1):
        k = k0 + K * (1.0 - 2.0**-i)
        r = R / 2 + R / 2 ** (i + 1)
        levels.append(k)
        radii.append(r)
        energies.append(tr.phi(k, r))
    return levels, radii, energies


def _certified(energies: list[float], mu: float) -> bool:
    phi0 = energies[0]
    return all(e <= phi0 / mu**i * (1 + 1e-12) for i, e in enumerate(energies))


def _bisect_c0(make_K, tr: _Truncation, R: float, k0: float, mu: float, steps: int, ceiling: float):
    """Smallest C₀ in [0, ceiling] whose trace is certified; None if even the ceiling fails."""
    if _certified(_run(tr, R, make_K(0.0), k0, steps)[2], mu):
        return 0.0
    if not _certified(_run(tr, R, make_K(ceiling), k0, steps)[2], mu):
        return None
    lo, hi = 0.0, ceiling
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        if _certified(_run(tr, R, make_K(mid), k0, steps)[2], mu):
            hi = mid
        else:
            lo = mid
        if hi - lo <= 1e-10 * hi:
            break
    return hi


def _finish(variant, tr, spec, center, R, K, k0, mu, eps, C0, steps, extra) -> IterationTrace:
    levels, radii, energies = _run(tr, R, K, k0, steps)
    masses = [tr.mass(k, r) for k, r in zip(levels, radii)]
    sup_half = tr.sup(R / 2)
    scale = max(K + k0, float(np.max(np.abs(tr.u))) if tr.u.size else 0.0, 1e-300)
    violations = int(sup_half > k0 + K + SUP_SLACK * scale)
    return IterationTrace(variant, tuple(float(c) for c in center), float(R), levels, radii, masses, energies,
                          float(K), mu, tuple(eps), float(C0), _certified(energies, mu), float(k0), sup_half,
                          violations, extra)


def degiorgi_sup_bound(form: AssembledForm, u, f=None, R: float = 0.5, q: float = 2.0,
                       ell: float = math.inf, center=(0.0, 0.0, 0.0), opts: SolveOptions | None = None,
                       steps: int = DEGIORGI_STEPS, mu: float | None = None) -> tuple[float, IterationTrace]:
    """Level-set iteration for a subsolution under the coercive sign condition.

    Levels k_i = K(1 - 2^{-i}), radii r_i = R/2 + R 2^{-(i+1)},
    K = C₀ R^{-n/2} φ(0, R) + R^{2-n/ℓ} ||f||_{L^ℓ(Ω_R)}. C₀ is the smallest
    value (bisection up to 2¹⁶) for which φ(k_i, r_i) <= φ(0, R)/μ^i holds for
    all i <= ``steps``; μ is the smallest value with μ^ε >= 2^{2+ε} for
    ε₁ = 2/n and ε₂ = 4/n - 2/ℓ, unless ``mu`` is given.
    """
    _scalar(form)
    if not q > 0:
        raise RegularityError(f"q must be positive, got {q}")
    if not ell > NDIM / 2:
        raise RegularityError(f"f must lie in L^ell with ell > n/2, got {ell}")
    spec = form.spec
    c = form.coefficients
    sign = check_sign_conditions(c)
    vmax = float(np.max(np.abs(c.V))) or 1.0
    if sign["V-div_b"]["min"] < -1e-12 * vmax:
        raise RegularityError(f"sign condition V - div b >= 0 fails (min {sign['V-div_b']['min']:.3e} "
                              f"at node {sign['V-div_b']['witness']})")
    vals = _field(spec, u)
    _require(residual_gate(form, vals, f, _ball_nodes(spec, center, R), "subsolution", opts=opts), "on Ω_R")
    tr = _Truncation(spec, vals[0], center, R)
    fval = _data(spec, f)
    F = _lnorm(fval, spec.node_weights * _ball_nodes(spec, center, R), ell)
    eps = (2.0 / NDIM, 4.0 / NDIM - (0.0 if math.isinf(ell) else 2.0 / ell))
    mu = _smallest_mu(eps, 2.0) if mu is None else float(mu)
    phi0 = tr.phi(0.0, R)
    f_term = _scale_power(R, 2.0, ell) * F
    norm_scale = R ** (-NDIM / 2) * phi0

    def make_K(C0: float) -> float:
        return C0 * norm_scale + f_term

    C0 = _bisect_c0(make_K, tr, R, 0.0, mu, steps, C0_CEILING)
    extra = {"F": F, "ell": ell, "q": q, "phi0": phi0}
    if C0 is None:
        trace = _finish("coercive", tr, spec, center, R, make_K(C0_CEILING), 0.0, mu, eps, C0_CEILING, steps,
                        {**extra, "failure": "no C0 <= 2^16 certifies the trace"})
        trace.certified = False
        return trace.K, trace
    K = make_K(C0)
    if K == 0.0 and phi0 == 0.0:
        # u <= 0 and f = 0: every level works; keep the bound at the f-term
        K = f_term
    trace = _finish("coercive", tr, spec, center, R, K, 0.0, mu, eps, C0, steps, extra)
    lq = tr.lq(q, R)
    if lq > 0:
        trace.extra["C_fit_q"] = (trace.sup_half - f_term) / (R ** (-NDIM / q) * lq)
    return K, trace


def _level_floor_constant(form: AssembledForm, center, R: float, V_minus: np.ndarray,
                            exps: dict) -> tuple[float, dict]:
    """𝒞 of the level floor, in the rescaled unit-ball units."""
    spec = form.spec
    c = form.coefficients
    w = spec.node_weights * _ball_nodes(spec, center, R)
    lam = c.lambda_
    cn = SOBOLEV_CONSTANT
    p, s, t = exps["p"], exps["s"], exps["t"]
    bn = _lnorm(np.linalg.norm(c.b[:, 0, 0], axis=0), w, s) * _scale_power(R, 1.0, s)
    dn = _lnorm(np.linalg.norm(c.d[:, 0, 0], axis=0), w, t) * _scale_power(R, 1.0, t)
    vn = _lnorm(V_minus, w, p) * _scale_power(R, 2.0, p)

    def expo(x: float, num: float, den_a: float, den_b: float) -> float:
        # n x / (den_a x - den_b n), with the x = inf limit
        return NDIM * num / den_a if math.isinf(x) else NDIM * x / (den_a * x - den_b * NDIM)

    out = (64 * cn / lam * bn) ** expo(s, 1.0, 2.0, 2.0) if bn > 0 else 0.0
    out += (64 * cn / lam * dn) ** expo(t, 1.0, 2.0, 2.0) if dn > 0 else 0.0
    out += (64 * cn**2 / lam * vn) ** expo(p, 1.0, 4.0, 2.0) if vn > 0 else 0.0
    return float(out), {"b": bn, "d": dn, "V_minus": vn}


def _c3_formula(form: AssembledForm, scaled: dict, script_c: float) -> float:
    c = form.coefficients
    lam, Lam, cn = c.lambda_, c.Lambda, SOBOLEV_CONSTANT
    poly = ((16 * Lam / lam) ** 2 + 72 + (32 * cn / lam) ** 2 + (32 * cn / lam * scaled["V_minus"]) ** 2
            + 2 * (32 / lam * scaled["b"]) ** 2)
    return float(poly + 2 * script_c)


def _moser_at(form, vals, tr, fval, R, ell, center, V_minus, exps, steps, mu) -> IterationTrace:
    spec = form.spec
    script_c, scaled = _level_floor_constant(form, center, R, V_minus, exps)
    u_l2 = tr.lq(2.0, R)
    k0 = script_c * R ** (-NDIM / 2) * u_l2
    F = _lnorm(fval, spec.node_weights * _ball_nodes(spec, center, R), ell)
    f_term = _scale_power(R, 2.0, ell) * F
    p, s = exps["p"], exps["s"]
    eps = tuple(e for e in (2.0 / NDIM,
                            4.0 / NDIM - (0.0 if math.isinf(ell) else 2.0 / ell),
                            4.0 / NDIM - (0.0 if math.isinf(p) else 2.0 / p),
                            2.0 / NDIM - (0.0 if math.isinf(s) else 2.0 / s)))
    eps_min = min(eps)
    mu = _smallest_mu([eps_min], 1.0) if mu is None else float(mu)
    phi0 = tr.phi(k0, R)

    def make_K(C0: float) -> float:
        return C0 * R ** (-NDIM / 2) * phi0 + f_term + k0

    C0 = _bisect_c0(make_K, tr, R, k0, mu, steps, C0_CEILING)
    certified = C0 is not None
    C0v = C0_CEILING if C0 is None else C0
    extra = {"script_C": script_c, "scaled_norms": scaled, "F": F, "phi0": phi0, "u_l2": u_l2,
             "C3": C0v + 2 * script_c, "C3_formula": _c3_formula(form, scaled, script_c), "eps_min": eps_min}
    trace = _finish("scale-dependent", tr, spec, center, R, make_K(C0v), k0, mu, (eps_min,), C0v, steps, extra)
    trace.certified = trace.certified and certified
    return trace


def moser_bound_general(form: AssembledForm, u, f=None, R: float = 0.25, q: float = 2.0,
                        ell: float = math.inf, center=(0.0, 0.0, 0.0), V_minus=None,
                        opts: SolveOptions | None = None, steps: int = DEGIORGI_STEPS,
                        mu: float | None = None) -> tuple[CheckRecord, list[IterationTrace]]:
    """Level-set iteration with the floor k₀ = 𝒞_R R^{-n/2} ||u⁺||_{L²(Ω_R)}, at R and 2R.

    No coercivity or sign condition is assumed. The empirical constant is
    C₃ = C₀ + 2𝒞_R; the verdict asks C₃(2R) >= C₃(R) when V₋ is nonzero.
    μ is the smallest value with μ^ε >= 2^{1+ε} unless ``mu`` is given.
    """
    _scalar(form)
    if not q > 0:
        raise RegularityError(f"q must be positive, got {q}")
    spec = form.spec
    c = form.coefficients
    vals = _field(spec, u)
    fval = _data(spec, f)
    if V_minus is None:
        V_minus = np.maximum(-c.V[0, 0], 0.0)
    else:
        V_minus = _data(spec, V_minus)
        if np.any(V_minus < 0):
            raise RegularityError("V_minus must be nonnegative")
    exps = {key: float(c.exponents.get(key, math.inf)) for key in ("p", "s", "t")}
    _require(residual_gate(form, vals, f, _ball_nodes(spec, center, 2 * R), "subsolution", opts=opts),
             "on Ω_2R")
    traces = []
    for radius in (R, 2 * R):
        tr = _Truncation(spec, vals[0], center, radius)
        traces.append(_moser_at(form, vals, tr, fval, radius, ell, center, V_minus, exps, steps, mu))
    C_R, C_2R = traces[0].extra["C3"], traces[1].extra["C3"]
    ratio = C_2R / C_R if C_R > 0 else math.inf
    has_neg = bool(np.any(V_minus[spec.omega_mask] > 0))
    ok = all(t.certified and t.violations == 0 for t in traces)
    if has_neg:
        ok = ok and ratio >= 1.0
    rec = CheckRecord("moser-general", "scale-dependent local boundedness", ratio, ">= 1" if has_neg else None,
                      None, verdict(ok),
                      details={"R": R, "C3": [C_R, C_2R],
                               "C3_formula": [t.extra["C3_formula"] for t in traces],
                               "bounds": [t.bound for t in traces], "sup_half": [t.sup_half for t in traces],
                               "violations": sum(t.violations for t in traces), "V_minus_nonzero": has_neg})
    return rec, traces


def degiorgi_record(K: float, trace: IterationTrace) -> CheckRecord:
    """Pass iff the trace is certified and sup_{Ω_{R/2}} u⁺ <= K."""
    ok = trace.certified and trace.violations == 0
    return CheckRecord("degiorgi", "coercive local boundedness", trace.sup_half, K, SUP_SLACK, verdict(ok),
                       details={"C0": trace.C0, "mu": trace.mu, "R": trace.R,
                                "C_fit_q": trace.extra.get("C_fit_q")})


# ------------------------------------------------------------------ crossover / Harnack / Hölder


def _lower_order_k(spec: GridSpec, f, g, center, R: float, ell: float, m: float) -> float:
    vol = 4.0 * math.pi / 3.0 * R**3
    w = spec.node_weights * _ball_nodes(spec, center, R)
    out = 0.0
    if f is not None:
        out += vol ** (2.0 / NDIM - (0.0 if math.isinf(ell) else 1.0 / ell)) * _lnorm(_data(spec, f), w, ell)
    if g is not None:
        gv = np.asarray(g.values if isinstance(g, GridFunction) else g, dtype=float)
        out += vol ** (1.0 / NDIM - (0.0 if math.isinf(m) else 1.0 / m)) * _lnorm(np.linalg.norm(gv, axis=0), w, m)
    return float(out)


def _nonneg(spec: GridSpec, vals: np.ndarray, region: np.ndarray) -> None:
    sel = region & (spec.node_weights > 0)
    if np.any(vals[0][sel] < 0):
        raise RegularityError(f"u must be nonnegative on the ball (min {vals[0][sel].min():.3e})")


def sample_subballs(spec: GridSpec, center, R: float, count: int, seed: int = 0) -> list[tuple[np.ndarray, float]]:
    """Balls B_r(y) ⊂ B_{3R/4}(center) with 2h <= r <= 3R/8."""
    rng = np.random.default_rng(seed)
    outer = 0.75 * R
    r_lo, r_hi = 2.0 * spec.h, 0.5 * outer
    if r_hi <= r_lo:
        raise RegularityError(f"R = {R} leaves no room for sub-balls above 2h")
    out = []
    c = np.asarray(center, dtype=float)
    for _ in range(count):
        r = float(np.exp(rng.uniform(math.log(r_lo), math.log(r_hi))))
        room = outer - r
        while True:
            z = rng.uniform(-1, 1, size=NDIM)
            if z @ z <= 1:
                break
        out.append((c + room * z, r))
    return out


def bmo_crossover_check(form: AssembledForm, u, f=None, g=None, ball_samples: int = 40, R: float = 0.5,
                        center=(0.0, 0.0, 0.0), k: float | None = None, qs=None, kappa: float = 2.0,
                        ell: float = math.inf, m: float = math.inf, seed: int = 0,
                        opts: SolveOptions | None = None) -> CheckRecord:
    """Largest q on a grid with ⨍(u+k)^{-q}·⨍(u+k)^{q} <= κ on every sampled ball.

    k follows the lower-order-term rule; when f and g vanish it is a small
    positive floor (1e-6·max u). Also reports the BMO seminorm of log(u + k).
    """
    _scalar(form)
    spec = form.spec
    vals = _field(spec, u)
    big = _ball_nodes(spec, center, R)
    _nonneg(spec, vals, big)
    _require(residual_gate(form, vals, f, big, "supersolution", g=g, opts=opts), "on B_R")
    if k is None:
        k = _lower_order_k(spec, f, g, center, R, ell, m)
        if k == 0.0:
            k = 1e-6 * max(float(np.max(vals[0][big])), 1e-300)
    qs = np.round(np.arange(0.05, 2.0 + 1e-9, 0.05), 10) if qs is None else np.asarray(qs, dtype=float)
    shifted = vals[0] + k
    if np.any(shifted[big & (spec.node_weights > 0)] <= 0):
        raise RegularityError("u + k is not bounded away from 0 on the ball")
    w = np.log(np.where(big, shifted, 1.0))
    balls = sample_subballs(spec, center, R, ball_samples, seed)
    products = np.zeros((len(balls), len(qs)))
    osc = np.zeros(len(balls))
    for b, (y, r) in enumerate(balls):
        sel = _ball_nodes(spec, y, r) & (spec.node_weights > 0)
        wb = w[sel]
        dev = wb - wb.mean()
        osc[b] = float(np.mean(np.abs(dev)))
        products[b] = np.mean(np.exp(-np.outer(qs, dev)), axis=1) * np.mean(np.exp(np.outer(qs, dev)), axis=1)
    worst = products.max(axis=0)
    passing = qs[worst <= kappa]
    q0 = float(passing.max()) if passing.size else 0.0
    bmo = float(osc.max())
    return CheckRecord("bmo-crossover", "crossover product bounded on sub-balls", q0, None, kappa,
                       verdict(q0 > 0),
                       details={"k": k, "qs": qs, "worst_product": worst, "bmo_log": bmo,
                                "q0_times_bmo": q0 * bmo, "balls": len(balls)})


def weak_harnack(form: AssembledForm, u, f=None, g=None, R: float = 0.5, center=(0.0, 0.0, 0.0),
                 q0: float | None = None, ell: float = math.inf, m: float = math.inf, seed: int = 0,
                 opts: SolveOptions | None = None) -> CheckRecord:
    """C₀ = (⨍_{B_{3R/4}} u^{q0})^{1/q0} / (inf_{B_{R/2}} u + lower-order terms)."""
    _scalar(form)
    spec = form.spec
    vals = _field(spec, u)
    big = _ball_nodes(spec, center, R)
    _nonneg(spec, vals, big)
    _require(residual_gate(form, vals, f, big, "supersolution", g=g, opts=opts), "on B_R")
    if q0 is None:
        q0 = bmo_crossover_check(form, vals, f, g, R=R, center=center, ell=ell, m=m, seed=seed, opts=opts).measured
        if q0 <= 0:
            q0 = 0.05
    live = spec.node_weights > 0
    outer = _ball_nodes(spec, center, 0.75 * R) & live
    inner = _ball_nodes(spec, center, 0.5 * R) & live
    w = spec.node_weights[outer]
    lhs = float((np.sum(w * vals[0][outer] ** q0) / np.sum(w)) ** (1.0 / q0))
    inf = float(vals[0][inner].min())
    terms = _lower_order_k(spec, f, g, center, R, ell, m)
    denom = inf + terms
    if denom <= 0:
        return CheckRecord("weak-harnack", "lower bound for supersolutions", math.nan, None, None, "report",
                           details={"degenerate": True, "lhs": lhs, "inf": inf, "q0": q0})
    return CheckRecord("weak-harnack", "lower bound for supersolutions", lhs / denom, None, None, "report",
                       details={"lhs": lhs, "inf": inf, "lower_order": terms, "q0": q0})


def harnack_ratio(form: AssembledForm, u, f=None, R: float = 0.25, center=(0.0, 0.0, 0.0),
                  ell: float = math.inf, scales: Sequence[float] = (1.0,), stability_tol: float = 3.0,
                  opts: SolveOptions | None = None) -> CheckRecord:
    """sup_{B_{R/4}} u / (inf_{B_{R/2}} u + R^{2-n/ℓ}||f||_{L^ℓ(B_R)}) at radii s·R.

    With two or more scales the verdict asks max/min of the ratios <= ``stability_tol``.
    """
    _scalar(form)
    spec = form.spec
    vals = _field(spec, u)
    fval = _data(spec, f)
    live = spec.node_weights > 0
    rows = []
    for s in scales:
        Rs = s * R
        big = _ball_nodes(spec, center, Rs)
        _nonneg(spec, vals, big)
        _require(residual_gate(form, vals, f, big, "solution", opts=opts), f"on B_{Rs:g}")
        sup = float(vals[0][_ball_nodes(spec, center, Rs / 4) & live].max())
        inf = float(vals[0][_ball_nodes(spec, center, Rs / 2) & live].min())
        F = _scale_power(Rs, 2.0, ell) * _lnorm(fval, spec.node_weights * big, ell)
        denom = inf + F
        rows.append({"R": Rs, "sup": sup, "inf": inf, "f_term": F,
                     "ratio": sup / denom if denom > 0 else math.inf})
    ratios = np.array([r["ratio"] for r in rows])
    if len(rows) < 2:
        return CheckRecord("harnack", "Harnack inequality", float(ratios[0]), None, None, "report",
                           details={"scales": rows})
    stability = float(ratios.max() / ratios.min()) if np.all(np.isfinite(ratios)) else math.inf
    return CheckRecord("harnack", "Harnack inequality", stability, None, stability_tol,
                       verdict(stability <= stability_tol), details={"scales": rows})


def holder_exponent(form: AssembledForm, u, R0: float, center=(0.0, 0.0, 0.0), pairs: int = 200,
                    eta_min: float = 0.2, seed: int = 0, min_radius_cells: float = 8.0,
                    opts: SolveOptions | None = None) -> CheckRecord:
    """η from the dyadic oscillation decay ω(r) = osc_{B_r} u, r = R0·2^{-j} >= 8h.

    θ is the fitted ratio ω(r/2)/ω(r) and η = log θ / log(1/2). The constant of
    |u(x) - u(y)| <= C (|x-y|/R0)^η (⨍_{B_R0}|u|^6)^{1/6} is measured on pairs in B_{R0/2}.
    """
    _scalar(form)
    spec = form.spec
    vals = _field(spec, u)
    _require(residual_gate(form, vals, None, _ball_nodes(spec, center, 2 * R0), "solution", opts=opts),
             "on B_2R0")
    levels = int(math.floor(math.log2(R0 / (min_radius_cells * spec.h)) + 1e-9)) + 1
    if levels < 3:
        raise RegularityError(f"R0 = {R0} gives {levels} dyadic levels above {min_radius_cells:g}h; need 3")
    radii = R0 * 2.0 ** -np.arange(levels)
    live = spec.node_weights > 0
    omega = np.array([float(np.ptp(vals[0][_ball_nodes(spec, center, r) & live])) for r in radii])
    if np.all(omega == 0):
        return CheckRecord("holder", "interior Hölder continuity", math.nan, None, eta_min, "report",
                           details={"degenerate": True, "radii": radii, "oscillation": omega})
    eta, _ = _fit_slope(radii, omega)
    theta = 2.0**-eta
    steps = omega[1:] / np.where(omega[:-1] > 0, omega[:-1], np.nan)
    sel = _ball_nodes(spec, center, R0) & live
    avg6 = float((np.sum(spec.node_weights[sel] * np.abs(vals[0][sel]) ** 6) / np.sum(spec.node_weights[sel])) ** (1 / 6))
    idx = np.argwhere(_ball_nodes(spec, center, R0 / 2) & live)
    rng = np.random.default_rng(seed)
    a = idx[rng.integers(len(idx), size=pairs)]
    b = idx[rng.integers(len(idx), size=pairs)]
    dist = np.linalg.norm((a - b) * spec.h, axis=1)
    keep = dist > 0
    diff = np.abs(vals[0][tuple(a[keep].T)] - vals[0][tuple(b[keep].T)])
    C = float(np.max(diff / ((dist[keep] / R0) ** eta * avg6))) if keep.any() and avg6 > 0 else math.nan
    return CheckRecord("holder", "interior Hölder continuity", float(eta), None, eta_min, verdict(eta >= eta_min),
                       fitted_exponent=float(eta),
                       details={"theta": theta, "radii": radii, "oscillation": omega, "step_ratios": steps,
                                "C_pairs": C, "R0": R0})
