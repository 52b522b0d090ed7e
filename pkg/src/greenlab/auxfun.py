"""Auxiliary-function apparatus: ψ(x, r; V), m(x, V), B_p constants,
comparability of m, the Fefferman-Phong ratio, and the Agmon distance."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from functools import cached_property
from itertools import product
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy import ndimage
from scipy.sparse.csgraph import connected_components, dijkstra

from .coefficients import Coefficients, PotentialPreset
from .grid import NDIM, GridFunction, GridSpec, discrete_gradient


class AuxError(ValueError):
    """Rejected auxiliary-function query."""


def _sphere_rule(n_r: int, n_t: int, n_p: int) -> tuple[np.ndarray, np.ndarray]:
    """Product rule on the unit ball: points (Q, 3) and weights summing to 4π/3."""
    tr, wr = np.polynomial.legendre.leggauss(n_r)
    rho = 0.5 * (tr + 1.0)
    wrho = 0.5 * wr * rho**2
    mu, wmu = np.polynomial.legendre.leggauss(n_t)
    phi = 2.0 * np.pi * (np.arange(n_p) + 0.5) / n_p
    wphi = np.full(n_p, 2.0 * np.pi / n_p)
    R, MU, PHI = np.meshgrid(rho, mu, phi, indexing="ij")
    W = wrho[:, None, None] * wmu[None, :, None] * wphi[None, None, :]
    s = np.sqrt(1.0 - MU**2)
    pts = np.stack([R * s * np.cos(PHI), R * s * np.sin(PHI), R * MU], axis=-1)
    return pts.reshape(-1, NDIM), W.ravel()


BALL_RULE = _sphere_rule(6, 6, 12)


@dataclass(frozen=True, eq=False)
class PotentialProfile:
    """Scalar nonnegative potential on a grid, with an optional analytic extension."""

    spec: GridSpec
    V: GridFunction
    analytic: PotentialPreset | None = None
    p: float = math.inf

    def __post_init__(self) -> None:
        if self.V.N != 1:
            raise AuxError("potential profiles are scalar")
        if np.any(self.V.values < 0):
            raise AuxError("potential must be nonnegative")

    @classmethod
    def from_preset(cls, spec: GridSpec, preset: PotentialPreset, p: float = math.inf) -> PotentialProfile:
        return cls(spec, GridFunction(spec, preset(spec.points)), preset, p)

    @classmethod
    def from_coefficients(cls, c: Coefficients) -> PotentialProfile:
        if c.potential is None:
            raise AuxError("coefficients carry no potential")
        return cls(c.spec, c.scalar_field("V") if c.N == 1 else GridFunction(c.spec, c.potential(c.spec.points)),
                   c.potential, float(c.exponents.get("p", math.inf)))

    @property
    def is_trivial(self) -> bool:
        return not np.any(self.V.values)

    def evaluate(self, x: np.ndarray) -> np.ndarray:
        """V at arbitrary points.

        Cheap analytic presets are evaluated directly. Random presets and
        grid-only profiles are interpolated trilinearly inside the box; outside
        it the analytic formula is required.
        """
        x = np.asarray(x, dtype=float)
        if self.analytic is not None and not self.analytic.is_random:
            return self.analytic(x)
        flat = x.reshape(-1, NDIM)
        idx = (flat - np.asarray(self.spec.origin)) / self.spec.h
        top = np.asarray(self.spec.dims) - 1
        inside = np.all((idx >= -1e-9) & (idx <= top + 1e-9), axis=1)
        if not inside.all() and self.analytic is None:
            raise AuxError("ball leaves the box and the potential has no analytic extension")
        out = np.empty(flat.shape[0])
        out[inside] = ndimage.map_coordinates(self.V.values[0], idx[inside].T, order=1, mode="nearest")
        if not inside.all():
            out[~inside] = self.analytic(flat[~inside])
        return out.reshape(x.shape[:-1])

    def ball_integrals(self, x: np.ndarray, r: np.ndarray, method: str = "auto", power: float = 1.0) -> np.ndarray:
        """∫_{B(x, r)} V^power for points ``x`` (P, 3) and radii ``r`` (P,).

        ``auto``: closed form for polynomial presets (power 1), otherwise the
        product Gauss rule. ``nodes``: plain h³ node sum (balls under 2h fall
        back to the Gauss rule).
        """
        x = np.atleast_2d(np.asarray(x, dtype=float))
        r = np.broadcast_to(np.asarray(r, dtype=float), x.shape[:1]).copy()
        if method == "auto" and power == 1.0 and self.analytic is not None:
            exact = self.analytic.ball_integral(x, r)
            if exact is not None:
                return np.asarray(exact, dtype=float)
        if method == "nodes":
            out = np.empty(r.size)
            vals = self.V.values[0] ** power
            for i, (xi, ri) in enumerate(zip(x, r)):
                if ri < 2.0 * self.spec.h:
                    out[i] = self.ball_integrals(xi[None], ri, "quadrature", power)[0]
                    continue
                inside = self.spec.distance_from(xi) <= ri
                out[i] = self.spec.h**3 * float(vals[inside].sum())
            return out
        pts, w = BALL_RULE
        out = np.empty(r.size)
        step = max(1, 200_000 // len(w))
        for s in range(0, r.size, step):
            xs, rs = x[s : s + step], r[s : s + step]
            sample = xs[:, None, :] + rs[:, None, None] * pts[None]
            vals = self.evaluate(sample)
            if power != 1.0:
                vals = vals**power
            out[s : s + step] = (vals @ w) * rs**3
        return out


def psi(profile: PotentialProfile, x, r, method: str = "auto") -> np.ndarray | float:
    """ψ(x, r) = r^{2-n} ∫_{B(x,r)} V. Vectorized over ``x`` (P, 3) and ``r``."""
    r_arr = np.asarray(r, dtype=float)
    if np.any(r_arr <= 0):
        raise AuxError("psi needs r > 0")
    x_arr = np.atleast_2d(np.asarray(x, dtype=float))
    rr = np.broadcast_to(r_arr, x_arr.shape[:1])
    vals = profile.ball_integrals(x_arr, rr, method) * rr ** (2.0 - NDIM)
    if np.ndim(x) == 1 and np.ndim(r) == 0:
        return float(vals[0])
    return vals


def m_values(profile: PotentialProfile, points: np.ndarray, rtol: float = 1e-8, max_doublings: int = 60) -> np.ndarray:
    """m(x, V) = 1 / sup{r : ψ(x, r) <= 1}, vectorized over points (P, 3).

    Bracket by doubling/halving (the upper end is pushed until ψ exceeds 1 at
    r, 2r and 4r, so the largest crossing is taken), then bisect in log r.
    """
    if profile.is_trivial:
        raise AuxError("m(x, V) is undefined for V ≡ 0")
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    P = pts.shape[0]

    def ps(mask: np.ndarray, r: np.ndarray) -> np.ndarray:
        return psi(profile, pts[mask], r[mask])

    vloc = np.maximum(profile.evaluate(pts), 0.0)
    mean_v = float(profile.V.values[0][profile.spec.omega_mask].mean())
    scale = np.where(vloc > 0, vloc, max(mean_v, 1e-300))
    hi = np.sqrt(3.0 / (4.0 * np.pi * scale))
    need = np.ones(P, dtype=bool)
    for _ in range(max_doublings):
        val = np.zeros(P)
        val[need] = ps(need, hi)
        low = need & (val <= 1.0)
        if not low.any():
            okay = need.copy()
            for mult in (2.0, 4.0):
                chk = np.zeros(P)
                chk[okay] = ps(okay, hi * mult)
                fail = okay & (chk <= 1.0)
                hi[fail] *= mult
                okay &= ~fail
            need = need & ~okay
            if not need.any():
                break
        else:
            hi[low] *= 2.0
    else:
        raise AuxError("no bracket for psi = 1 within 60 doublings; potential too degenerate on this box")
    lo = hi / 2.0
    need = np.ones(P, dtype=bool)
    for _ in range(max_doublings):
        val = np.zeros(P)
        val[need] = ps(need, lo)
        high = need & (val > 1.0)
        if not high.any():
            break
        hi[high] = lo[high]
        lo[high] /= 2.0
        need = high
    else:
        raise AuxError("no lower bracket for psi = 1 within 60 halvings")
    # bracketed Illinois iteration on f(t) = log ψ(e^t), same 1e-8 bracket tolerance
    llo, lhi = np.log(lo), np.log(hi)
    flo = np.log(np.maximum(psi(profile, pts, lo), 1e-300))
    fhi = np.log(psi(profile, pts, hi))
    side = np.zeros(P, dtype=int)
    active = np.ones(P, dtype=bool)
    for _ in range(200):
        width = lhi - llo
        active &= width > rtol
        if not active.any():
            break
        a = np.flatnonzero(active)
        denom = fhi[a] - flo[a]
        t = np.where(np.isfinite(flo[a]) & (denom > 0), llo[a] - flo[a] * (lhi[a] - llo[a]) / np.where(denom > 0, denom, 1.0),
                     0.5 * (llo[a] + lhi[a]))
        # keep strictly inside the bracket, and fall back to bisection near the ends
        inner = 0.05 * width[a]
        t = np.clip(t, llo[a] + inner, lhi[a] - inner)
        ft = np.log(np.maximum(psi(profile, pts[a], np.exp(t)), 1e-300))
        up = ft > 0.0
        done = np.abs(ft) <= 1e-13
        ia, ib = a[up], a[~up]
        lhi[ia], fhi[ia] = t[up], ft[up]
        flo[ia[side[ia] == 1]] *= 0.5
        side[ia] = 1
        llo[ib], flo[ib] = t[~up], ft[~up]
        fhi[ib[side[ib] == -1]] *= 0.5
        side[ib] = -1
        fin = a[done]
        llo[fin] = lhi[fin] = t[done]
    return np.exp(-0.5 * (llo + lhi))


def m_of_x(profile: PotentialProfile, x) -> float:
    return float(m_values(profile, np.asarray(x, dtype=float)[None])[0])


def m_field(profile: PotentialProfile) -> GridFunction:
    """m(x, V) at every grid node."""
    pts = profile.spec.points.reshape(-1, NDIM)
    return GridFunction(profile.spec, m_values(profile, pts).reshape(profile.spec.shape))


def psi_residual(profile: PotentialProfile, m: GridFunction) -> float:
    """max |ψ(x, 1/m(x)) - 1| over masked nodes."""
    mask = profile.spec.omega_mask
    pts = profile.spec.points[mask]
    return float(np.max(np.abs(psi(profile, pts, 1.0 / m.values[0][mask]) - 1.0)))


def sample_balls(spec: GridSpec, count: int, seed: int = 0, interior_third: bool = False,
                 origin_centered: bool = False) -> list[tuple[np.ndarray, float]]:
    """Random balls inside the box (centers and radii)."""
    rng = np.random.default_rng(seed)
    half = 0.5 * spec.extent.min()
    c0 = spec.center
    reach = half / 3.0 if interior_third else half
    balls = []
    while len(balls) < count:
        if origin_centered:
            center = np.zeros(NDIM)
            r = rng.uniform(2 * spec.h, 0.9 * (half - np.abs(c0).max()))
        else:
            center = c0 + rng.uniform(-reach, reach, NDIM) * 0.9
            room = reach - np.abs(center - c0).max()
            if room < 2 * spec.h:
                continue
            r = rng.uniform(2 * spec.h, room)
        balls.append((center, float(r)))
    return balls


@dataclass(frozen=True)
class BpResult:
    constant: float
    p: float
    ratios: np.ndarray
    worst_ball: tuple


def bp_constant(profile: PotentialProfile, p: float, ball_samples=200, seed: int = 0) -> BpResult:
    """max over balls of (avg V^p)^{1/p} / avg V; a lower estimate of the B_p constant."""
    if not p > 1:
        raise AuxError("B_p needs p > 1")
    if isinstance(ball_samples, int):
        if ball_samples < 200:
            raise AuxError("B_p estimate needs at least 200 sampled balls")
        random_preset = profile.analytic is not None and profile.analytic.is_random
        balls = sample_balls(profile.spec, ball_samples, seed, interior_third=random_preset)
    else:
        balls = list(ball_samples)
    centers = np.array([b[0] for b in balls], dtype=float)
    radii = np.array([b[1] for b in balls], dtype=float)
    vol = 4.0 * np.pi / 3.0 * radii**3
    mean_v = profile.ball_integrals(centers, radii, "quadrature") / vol
    if np.any(mean_v <= 0):
        raise AuxError("a sampled ball carries zero potential mass")
    mean_vp = profile.ball_integrals(centers, radii, "quadrature", power=p) / vol
    ratios = mean_vp ** (1.0 / p) / mean_v
    i = int(np.argmax(ratios))
    return BpResult(float(ratios[i]), p, ratios, (centers[i].tolist(), float(radii[i])))


@dataclass(frozen=True)
class ComparabilityReport:
    C: float
    c: float
    k0: float
    C_prime: float
    C_prime_bound: float
    pairs: int
    a_pairs: int
    bounded: bool

    @property
    def a_holds(self) -> bool:
        return self.a_pairs == 0 or self.C_prime <= self.C_prime_bound * (1 + 1e-9)


def verify_m_comparability(profile: PotentialProfile, pair_samples=500, seed: int = 0,
                           C_cap: float = 2.0, k0_max: float = 10.0, m_at=None) -> ComparabilityReport:
    """Fit the comparability constants of m on sampled node pairs.

    (b) m(y) <= C [1 + |x-y| m(x)]^{k0} m(x): k0 is the smallest value on a
    0.01 grid whose best C is at most ``C_cap``. (c) gives the largest c with
    m(y) >= c m(x) / [1 + |x-y| m(x)]^{k0/(k0+1)}. (a) records the spread of
    m(x)/m(y) over pairs with |x-y| <= C/m(x), against the bound implied by
    (b) and (c).
    """
    spec = profile.spec
    if isinstance(pair_samples, int):
        if pair_samples < 500:
            raise AuxError("comparability fit needs at least 500 pairs")
        rng = np.random.default_rng(seed)
        nodes = spec.points[spec.omega_mask]
        i = rng.integers(0, len(nodes), pair_samples)
        j = rng.integers(0, len(nodes), pair_samples)
        keep = i != j
        xs, ys = nodes[i[keep]], nodes[j[keep]]
    else:
        xs = np.array([p[0] for p in pair_samples], dtype=float)
        ys = np.array([p[1] for p in pair_samples], dtype=float)
    mx = m_values(profile, xs) if m_at is None else m_at(xs)
    my = m_values(profile, ys) if m_at is None else m_at(ys)
    t = 1.0 + np.linalg.norm(xs - ys, axis=1) * mx
    ratio = my / mx
    k0 = None
    for cand in np.arange(0.0, k0_max + 1e-12, 0.01):
        if np.max(ratio / t**cand) <= C_cap:
            k0 = float(round(cand, 2))
            break
    bounded = k0 is not None
    if k0 is None:
        k0 = k0_max
    C = float(np.max(ratio / t**k0))
    c = float(np.min(ratio * t ** (k0 / (k0 + 1.0))))
    near = np.linalg.norm(xs - ys, axis=1) <= C / mx
    spread = np.maximum(ratio, 1.0 / ratio)[near]
    C_prime = float(spread.max()) if spread.size else 1.0
    bound = max(C * (1.0 + C) ** k0, (1.0 + C) ** (k0 / (k0 + 1.0)) / c)
    return ComparabilityReport(C, c, k0, C_prime, float(bound), int(len(xs)), int(near.sum()), bounded)


def random_bumps(spec: GridSpec, count: int, seed: int = 0, min_width: float | None = None) -> list[GridFunction]:
    """Compactly supported C³ bumps (1 - |x-c|²/s²)₊⁴ inside the mask."""
    rng = np.random.default_rng(seed)
    half = 0.5 * spec.extent.min()
    dist_in = spec.distance_to_boundary()
    lo = min_width or 4.0 * spec.h
    out = []
    tries = 0
    while len(out) < count:
        tries += 1
        if tries > 100 * count:
            raise AuxError("could not place bumps inside the domain")
        s = rng.uniform(lo, max(0.45 * half, 1.5 * lo))
        c = spec.center + rng.uniform(-1.0, 1.0, NDIM) * (half - s)
        idx = spec.nearest_node(c)
        if dist_in[idx] <= s + spec.h:
            continue
        r2 = np.sum((spec.points - c) ** 2, axis=-1) / s**2
        vals = np.clip(1.0 - r2, 0.0, None) ** 4
        out.append(GridFunction(spec, vals * spec.omega_mask, trace_zero=True))
    return out


@dataclass(frozen=True)
class FeffermanPhongResult:
    empirical_C: float
    ratios: np.ndarray
    skipped: int


def fefferman_phong_check(profile: PotentialProfile, trial_functions=50, m: GridFunction | None = None,
                          seed: int = 0) -> FeffermanPhongResult:
    """max over trials of ∫u²m² / (∫|Du|² + ∫u²V)."""
    spec = profile.spec
    trials = random_bumps(spec, trial_functions, seed) if isinstance(trial_functions, int) else list(trial_functions)
    if m is None:
        m = m_field(profile)
    w = spec.node_weights
    m2 = m.values[0] ** 2
    V = profile.V.values[0]
    ratios, skipped = [], 0
    for u in trials:
        u2 = u.values[0] ** 2
        du2 = discrete_gradient(u).magnitude() ** 2
        den = float(np.sum(w * (du2 + u2 * V)))
        if den == 0.0:
            skipped += 1
            continue
        ratios.append(float(np.sum(w * u2 * m2)) / den)
    ratios = np.asarray(ratios)
    return FeffermanPhongResult(float(ratios.max()) if ratios.size else 0.0, ratios, skipped)


def stencil_offsets(kind: str = "radius2") -> np.ndarray:
    """Half of the neighbor offsets (one of each ± pair).

    ``moore26``: offsets in {-1,0,1}³. ``radius2``: primitive offsets in
    {-2..2}³ (98 neighbors), which cuts the worst-case metric anisotropy from
    about 13% to about 3%.
    """
    span = 1 if kind == "moore26" else 2
    if kind not in ("moore26", "radius2"):
        raise AuxError(f"unknown stencil '{kind}'")
    offs = []
    for o in product(range(-span, span + 1), repeat=NDIM):
        if o == (0, 0, 0) or math.gcd(*map(abs, o)) != 1:
            continue
        if o > tuple(-v for v in o):
            offs.append(o)
    return np.array(offs, dtype=int)


@dataclass(frozen=True, eq=False)
class AgmonGraph:
    """Weighted lattice graph on masked nodes; edge weight = length × mean m."""

    spec: GridSpec
    m: np.ndarray
    stencil: str = "radius2"

    @cached_property
    def node_index(self) -> np.ndarray:
        idx = -np.ones(self.spec.shape, dtype=np.int64)
        idx[self.spec.omega_mask] = np.arange(self.spec.n_mask)
        return idx

    @cached_property
    def matrix(self) -> sp.csr_matrix:
        spec = self.spec
        mask = spec.omega_mask
        nodes = np.argwhere(mask)
        idx = self.node_index
        mm = self.m
        rows, cols, vals = [], [], []
        dims = np.asarray(spec.dims)
        for off in stencil_offsets(self.stencil):
            tgt = nodes + off
            ok = np.all((tgt >= 0) & (tgt < dims), axis=1)
            src, tgt = nodes[ok], tgt[ok]
            ok = mask[tuple(tgt.T)]
            src, tgt = src[ok], tgt[ok]
            length = spec.h * float(np.linalg.norm(off))
            w = length * 0.5 * (mm[tuple(src.T)] + mm[tuple(tgt.T)])
            rows.append(idx[tuple(src.T)])
            cols.append(idx[tuple(tgt.T)])
            vals.append(w)
        r = np.concatenate(rows)
        c = np.concatenate(cols)
        v = np.concatenate(vals)
        if np.any(v <= 0):
            raise AuxError("Agmon edge weights must be positive")
        g = sp.coo_matrix((np.concatenate([v, v]), (np.concatenate([r, c]), np.concatenate([c, r]))),
                          shape=(spec.n_mask, spec.n_mask)).tocsr()
        n_comp, _ = connected_components(g, directed=False)
        if n_comp != 1:
            raise AuxError("Agmon graph is disconnected on the mask")
        return g

    @classmethod
    def build(cls, profile: PotentialProfile, m: GridFunction | None = None, stencil: str = "radius2") -> AgmonGraph:
        m = m or m_field(profile)
        return cls(profile.spec, np.asarray(m.values[0]), stencil)

    def vertex(self, x) -> int:
        idx = self.spec.nearest_node(x)
        v = int(self.node_index[idx])
        if v < 0:
            raise AuxError(f"point {tuple(np.round(x, 12))} is outside the domain")
        return v

    def distances_from(self, x) -> GridFunction:
        """Graph distance from node x to every masked node (inf outside)."""
        d = dijkstra(self.matrix, directed=False, indices=self.vertex(x))
        out = np.zeros(self.spec.shape)
        out[self.spec.omega_mask] = d
        return GridFunction(self.spec, out)


def agmon_distance(graph: AgmonGraph, x, y) -> float:
    """Shortest weighted path length; computed from the lower-index endpoint so d(x,y) = d(y,x) exactly."""
    a, b = graph.vertex(x), graph.vertex(y)
    if a == b:
        return 0.0
    src, dst = min(a, b), max(a, b)
    return float(dijkstra(graph.matrix, directed=False, indices=src)[dst])


def write_m_csv(path, profile: PotentialProfile, points, m: np.ndarray | None = None) -> Path:
    points = np.atleast_2d(np.asarray(points, dtype=float))
    m = m_values(profile, points) if m is None else np.asarray(m)
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x1", "x2", "x3", "m"])
        for p, v in zip(points, m):
            w.writerow([f"{p[0]:.12g}", f"{p[1]:.12g}", f"{p[2]:.12g}", f"{v:.12g}"])
    return path


def write_agmon_csv(path, triples) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x1", "x2", "x3", "y1", "y2", "y3", "d"])
        for x, y, d in triples:
            w.writerow([*(f"{v:.12g}" for v in x), *(f"{v:.12g}" for v in y), f"{d:.12g}"])
    return path
