"""Uniform 3-D grids, N-component grid functions, discrete calculus and norms."""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
from scipy import ndimage

NDIM = 3
SOBOLEV_EXPONENT = 2.0 * NDIM / (NDIM - 2)  # 2* = 6
DOMAIN_PRESETS = ("full-box", "centered-ball", "L-shape")

_FACE_NEIGHBORS = ndimage.generate_binary_structure(3, 1)


class GridError(ValueError):
    """Invalid grid construction or grid-function input."""


class RegionWarning(UserWarning):
    """A quadrature region does not meet the domain."""


@dataclass(frozen=True, eq=False)
class GridSpec:
    """Uniform node lattice with a mask marking the open set.

    Node ``(i, j, k)`` sits at ``origin + h * (i, j, k)``. Arrays are laid out
    as ``values[component, i, j, k]``.
    """

    dims: tuple[int, int, int]
    h: float
    origin: tuple[float, float, float]
    omega_mask: np.ndarray
    preset: str = "full-box"
    params: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        mask = np.array(self.omega_mask, dtype=bool)
        if mask.shape != tuple(self.dims):
            raise GridError(f"mask shape {mask.shape} does not match dims {self.dims}")
        mask.setflags(write=False)
        object.__setattr__(self, "omega_mask", mask)

    @property
    def n(self) -> int:
        return NDIM

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.dims)

    @property
    def n_nodes(self) -> int:
        return int(np.prod(self.dims))

    @property
    def extent(self) -> np.ndarray:
        return (np.asarray(self.dims) - 1) * self.h

    @property
    def center(self) -> np.ndarray:
        return np.asarray(self.origin) + 0.5 * self.extent

    @cached_property
    def axes(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return tuple(self.origin[a] + self.h * np.arange(self.dims[a]) for a in range(NDIM))

    @cached_property
    def points(self) -> np.ndarray:
        """Node coordinates, shape ``(nx, ny, nz, 3)``."""
        grids = np.meshgrid(*self.axes, indexing="ij")
        pts = np.stack(grids, axis=-1)
        pts.setflags(write=False)
        return pts

    @cached_property
    def boundary_mask(self) -> np.ndarray:
        """Nodes outside the mask with a face neighbor inside it."""
        grown = ndimage.binary_dilation(self.omega_mask, structure=_FACE_NEIGHBORS)
        out = grown & ~self.omega_mask
        out.setflags(write=False)
        return out

    @cached_property
    def dof_nodes(self) -> np.ndarray:
        """Flat (C-order) indices of masked nodes; the trace-zero unknowns."""
        return np.flatnonzero(self.omega_mask.ravel())

    @property
    def n_mask(self) -> int:
        return int(self.dof_nodes.size)

    @cached_property
    def node_weights(self) -> np.ndarray:
        """Midpoint quadrature weights: h³ on the mask, h³/2 on boundary nodes."""
        w = self.h**3 * (self.omega_mask + 0.5 * self.boundary_mask)
        w.setflags(write=False)
        return w

    def distance_from(self, y) -> np.ndarray:
        return np.linalg.norm(self.points - np.asarray(y, dtype=float), axis=-1)

    def nearest_node(self, x) -> tuple[int, int, int]:
        idx = np.rint((np.asarray(x, dtype=float) - np.asarray(self.origin)) / self.h).astype(int)
        if np.any(idx < 0) or np.any(idx >= np.asarray(self.dims)):
            raise GridError(f"point {tuple(x)} lies outside the grid")
        return tuple(int(i) for i in idx)

    def position(self, idx) -> np.ndarray:
        return np.asarray(self.origin) + self.h * np.asarray(idx, dtype=float)

    def snap(self, x) -> np.ndarray:
        """Coordinates of the node nearest to ``x``."""
        return self.position(self.nearest_node(x))

    def is_inside(self, x) -> bool:
        return bool(self.omega_mask[self.nearest_node(x)])

    def distance_to_boundary(self) -> np.ndarray:
        """Euclidean distance from every node to the nearest non-mask node."""
        return ndimage.distance_transform_edt(self.omega_mask) * self.h

    def header(self, components: int = 1) -> dict:
        return {
            "dims": list(self.dims),
            "h": self.h,
            "origin": list(self.origin),
            "N": components,
            "mask-preset": self.preset,
        }

    def enlarged(self, factor: int = 2) -> GridSpec:
        """Concentric full box with ``factor`` times the side and the same spacing."""
        dims = tuple((d - 1) * factor + 1 for d in self.dims)
        origin = tuple(self.center - 0.5 * (np.asarray(dims) - 1) * self.h)
        return make_grid(dims, self.h, origin, "full-box")


def make_grid(
    dims,
    h: float,
    origin=None,
    domain_preset: str = "full-box",
    **params,
) -> GridSpec:
    """Build a grid and its domain mask.

    ``origin=None`` centers the box at 0. ``centered-ball`` accepts ``radius``
    (default 0.9 of the half extent); ``L-shape`` removes the quadrant
    ``x > cx, y > cy`` through the box center.
    """
    dims = tuple(int(d) for d in dims)
    if len(dims) != NDIM:
        raise GridError("dims must be a triple")
    if any(d < 9 for d in dims):
        raise GridError(f"each dimension needs at least 9 nodes, got {dims}")
    if any(d % 2 == 0 for d in dims):
        raise GridError(f"dims must be odd so the box center is a node, got {dims}")
    if not h > 0:
        raise GridError(f"spacing must be positive, got {h}")
    h = float(h)
    ext = (np.asarray(dims) - 1) * h
    if origin is None:
        origin = tuple(-0.5 * ext)
    origin = tuple(float(o) for o in origin)

    interior = np.zeros(dims, dtype=bool)
    interior[1:-1, 1:-1, 1:-1] = True
    axes = [origin[a] + h * np.arange(dims[a]) for a in range(NDIM)]
    X, Y, Z = np.meshgrid(*axes, indexing="ij")
    c = np.asarray(origin) + 0.5 * ext

    if domain_preset == "full-box":
        mask = interior
    elif domain_preset == "centered-ball":
        radius = float(params.get("radius", 0.9 * 0.5 * ext.min()))
        params = {"radius": radius}
        r2 = (X - c[0]) ** 2 + (Y - c[1]) ** 2 + (Z - c[2]) ** 2
        mask = interior & (r2 < radius**2)
    elif domain_preset == "L-shape":
        params = {}
        mask = interior & ~((X > c[0] + 1e-12) & (Y > c[1] + 1e-12))
    else:
        raise GridError(f"unknown domain preset '{domain_preset}'; expected one of {DOMAIN_PRESETS}")

    if not mask.any():
        raise GridError("domain mask is empty")
    _, n_components = ndimage.label(mask, structure=_FACE_NEIGHBORS)
    if n_components != 1:
        raise GridError(f"domain mask is disconnected ({n_components} components)")
    return GridSpec(dims, h, origin, mask, domain_preset, dict(params))


@dataclass(frozen=True, eq=False)
class GridFunction:
    """N-component field on a grid; ``values`` has shape ``(N, nx, ny, nz)``."""

    spec: GridSpec
    values: np.ndarray
    trace_zero: bool = False

    def __post_init__(self) -> None:
        vals = np.array(self.values, dtype=float)
        if vals.shape == self.spec.shape:
            vals = vals[None]
        if vals.ndim != 4 or vals.shape[1:] != self.spec.shape:
            raise GridError(f"values shape {vals.shape} incompatible with grid {self.spec.shape}")
        if not np.all(np.isfinite(vals)):
            raise GridError("grid function has non-finite values")
        if self.trace_zero and np.any(vals[:, ~self.spec.omega_mask] != 0.0):
            raise GridError("trace-zero function is nonzero outside the mask")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    @property
    def N(self) -> int:
        return self.values.shape[0]

    def magnitude(self) -> np.ndarray:
        """Pointwise Euclidean norm across components."""
        if self.N == 1:
            return np.abs(self.values[0])
        return np.sqrt(np.sum(self.values**2, axis=0))

    def scaled(self, c: float) -> GridFunction:
        return GridFunction(self.spec, c * self.values, self.trace_zero)

    def to_dofs(self) -> np.ndarray:
        """Component-major vector over masked nodes."""
        flat = self.values.reshape(self.N, -1)
        return flat[:, self.spec.dof_nodes].ravel()

    @classmethod
    def from_dofs(cls, spec: GridSpec, vec: np.ndarray, components: int = 1) -> GridFunction:
        vec = np.asarray(vec, dtype=float).reshape(components, spec.n_mask)
        vals = np.zeros((components, spec.n_nodes))
        vals[:, spec.dof_nodes] = vec
        return cls(spec, vals.reshape((components,) + spec.shape), trace_zero=True)

    @classmethod
    def from_function(cls, spec: GridSpec, fn, trace_zero: bool = False) -> GridFunction:
        """Sample ``fn(points)`` (points shaped ``(..., 3)``) at the nodes."""
        vals = np.asarray(fn(spec.points), dtype=float)
        if vals.shape == spec.shape:
            vals = vals[None]
        else:
            vals = np.moveaxis(vals, -1, 0)
        if trace_zero:
            vals = vals * spec.omega_mask
        return cls(spec, vals, trace_zero)

    def masked(self) -> GridFunction:
        """Copy with values outside the mask set to zero."""
        return GridFunction(self.spec, self.values * self.spec.omega_mask, trace_zero=True)


def discrete_gradient(u: GridFunction) -> GridFunction:
    """Second-order centered differences, one-sided second order at grid edges.

    Returns ``3N`` components ordered ``(alpha, i)``: index ``alpha * N + i``.
    Trace-zero fields carry genuine zeros outside the mask, so differences
    across the mask boundary see the Dirichlet data.
    """
    h = u.spec.h
    parts = [np.gradient(u.values, h, axis=alpha + 1, edge_order=2) for alpha in range(NDIM)]
    return GridFunction(u.spec, np.concatenate(parts, axis=0))


@dataclass(frozen=True)
class Region:
    """Quadrature region: the mask, a ball, an annulus, or a ball complement."""

    kind: str = "mask"
    center: tuple[float, float, float] = (0.0, 0.0, 0.0)
    r_in: float = 0.0
    r_out: float = math.inf

    def indicator(self, spec: GridSpec) -> np.ndarray:
        if self.kind == "mask":
            return np.ones(spec.shape, dtype=bool)
        dist = spec.distance_from(self.center)
        if self.kind == "ball":
            return dist <= self.r_out
        if self.kind == "annulus":
            return (dist >= self.r_in) & (dist <= self.r_out)
        if self.kind == "complement":
            return dist >= self.r_in
        raise GridError(f"unknown region kind '{self.kind}'")

    def weights(self, spec: GridSpec) -> np.ndarray:
        return spec.node_weights * self.indicator(spec)


MASK = Region()


def ball(center, r: float) -> Region:
    return Region("ball", tuple(float(c) for c in center), 0.0, float(r))


def annulus(center, r_in: float, r_out: float) -> Region:
    return Region("annulus", tuple(float(c) for c in center), float(r_in), float(r_out))


def complement_ball(center, r: float) -> Region:
    return Region("complement", tuple(float(c) for c in center), float(r), math.inf)


def _lq(mag: np.ndarray, w: np.ndarray, q: float) -> float:
    if math.isinf(q):
        sel = w > 0
        return float(mag[sel].max()) if sel.any() else 0.0
    return float(np.sum(w * mag**q) ** (1.0 / q))


def _region_weights(spec: GridSpec, region: Region | None) -> np.ndarray:
    w = (region or MASK).weights(spec)
    if not np.any(w > 0):
        warnings.warn("quadrature region is disjoint from the domain; norm set to 0", RegionWarning, stacklevel=3)
    return w


def norm(
    u: GridFunction,
    kind: str = "Lq",
    region: Region | None = None,
    q: float = 2.0,
    m_weight: np.ndarray | GridFunction | None = None,
) -> float:
    """Quadrature norm of ``u``.

    kind: ``"Lq"`` (with ``q`` in (0, inf]), ``"L2*"`` (q = 6), ``"W12"``
    (||u||_2 + ||Du||_2), ``"Y12"`` ((||u||_6² + ||Du||_2²)^½) or ``"WV12"``
    ((||m u||_2² + ||Du||_2²)^½, needs ``m_weight``).
    """
    w = _region_weights(u.spec, region)
    if not np.any(w > 0):
        return 0.0
    if kind == "Lq":
        if not q > 0:
            raise GridError(f"L^q needs q > 0, got {q}")
        return _lq(u.magnitude(), w, q)
    if kind == "L2*":
        return _lq(u.magnitude(), w, SOBOLEV_EXPONENT)
    grad = discrete_gradient(u).magnitude()
    if kind == "W12":
        return _lq(u.magnitude(), w, 2.0) + _lq(grad, w, 2.0)
    if kind == "Y12":
        return math.hypot(_lq(u.magnitude(), w, SOBOLEV_EXPONENT), _lq(grad, w, 2.0))
    if kind == "WV12":
        if m_weight is None:
            raise GridError("W_V^{1,2} norm needs the m(x,V) weight")
        m = m_weight.values[0] if isinstance(m_weight, GridFunction) else np.asarray(m_weight)
        return math.hypot(_lq(m * u.magnitude(), w, 2.0), _lq(grad, w, 2.0))
    raise GridError(f"unknown norm kind '{kind}'")


def ball_average_functional(spec: GridSpec, y, rho: float, k: int = 0, components: int = 1) -> GridFunction:
    """Uniform weights over the nodes of B_rho(y) in component ``k``, summing to 1."""
    if rho < 2.0 * spec.h * (1.0 - 1e-12):
        raise GridError(f"averaging radius {rho} is below the 2h floor ({2 * spec.h})")
    y = np.asarray(y, dtype=float)
    lo = np.asarray(spec.origin)
    hi = lo + spec.extent
    if np.any(y - rho < lo) or np.any(y + rho > hi):
        raise GridError("averaging ball leaves the grid")
    dist = spec.distance_from(y)
    inside = dist <= rho * (1.0 + 1e-12)
    if np.any(inside & ~spec.omega_mask):
        raise GridError("averaging ball leaves the domain")
    vals = np.zeros((components,) + spec.shape)
    vals[k] = inside / inside.sum()
    return GridFunction(spec, vals, trace_zero=True)


def pairing(weights: GridFunction, u: GridFunction) -> float:
    """Plain nodal sum of ``weights * u`` (the action of a quadrature functional)."""
    return float(np.sum(weights.values * u.values))


@dataclass(frozen=True)
class Cutoff:
    """Smooth radial cutoff between radii ``r < R``.

    ``ball`` orientation: 1 on B_r, 0 outside B_R. ``complement`` orientation:
    0 on B_r, 1 outside B_R. The transition is the C¹ smoothstep, whose slope
    is at most 1.5/(R - r).
    """

    center: tuple[float, float, float]
    r: float
    R: float
    orientation: str = "ball"

    def __post_init__(self) -> None:
        if not (0 < self.r < self.R):
            raise GridError(f"cutoff needs 0 < r < R, got r={self.r}, R={self.R}")
        if self.orientation not in ("ball", "complement"):
            raise GridError(f"unknown cutoff orientation '{self.orientation}'")

    def field(self, spec: GridSpec) -> GridFunction:
        t = np.clip((spec.distance_from(self.center) - self.r) / (self.R - self.r), 0.0, 1.0)
        step = t * t * (3.0 - 2.0 * t)
        zeta = 1.0 - step if self.orientation == "ball" else step
        return GridFunction(spec, zeta)

    def gradient_constant(self, spec: GridSpec) -> float:
        """Measured C in max|Dζ| <= C/(R - r)."""
        grad = discrete_gradient(self.field(spec)).magnitude()
        return float(grad.max() * (self.R - self.r))


def write_raw(u: GridFunction, path) -> tuple[Path, Path]:
    """Dump ``u`` as little-endian float64, x fastest, components in sequence.

    Writes ``<path>.raw`` and a JSON sidecar ``<path>.json``.
    """
    path = Path(path)
    raw, side = path.with_suffix(".raw"), path.with_suffix(".json")
    data = np.concatenate([np.ravel(c, order="F") for c in u.values]).astype("<f8")
    raw.write_bytes(data.tobytes())
    side.write_text(json.dumps(u.spec.header(u.N), indent=2, sort_keys=True) + "\n")
    return raw, side


def read_raw(path) -> tuple[np.ndarray, dict]:
    """Inverse of :func:`write_raw`; returns ``(values[N, nx, ny, nz], header)``."""
    path = Path(path)
    header = json.loads(path.with_suffix(".json").read_text())
    dims = tuple(header["dims"])
    data = np.frombuffer(path.with_suffix(".raw").read_bytes(), dtype="<f8")
    comps = data.reshape(header["N"], -1)
    return np.stack([c.reshape(dims, order="F") for c in comps]), header


def space_inclusion_scan(ks=(1, 2, 3, 4), h: float = 0.125, decay: float = 1.25) -> list[dict]:
    """Norms of f = (1 + |x|)^{-decay} on centered boxes of side 2^k.

    With decay in (1, 3/2], f has finite ||f||_6 + ||Df||_2 on all of R³ but
    ||f||_2 grows without bound, so Y^{1,2} is strictly larger than W^{1,2}.
    """
    rows = []
    for k in ks:
        side = 2.0**k
        n = int(round(side / h)) + 1
        n += 1 - n % 2
        spec = make_grid((n, n, n), side / (n - 1), origin=(-side / 2,) * NDIM)
        f = GridFunction.from_function(spec, lambda p: (1.0 + np.linalg.norm(p, axis=-1)) ** -decay)
        l2 = norm(f, "Lq", q=2.0)
        l6 = norm(f, "L2*")
        dl2 = norm(discrete_gradient(f), "Lq", q=2.0)
        rows.append({"k": int(k), "side": side, "nodes": n, "L2": l2, "L6": l6, "DL2": dl2, "Y_sum": l6 + dl2})
    return rows
