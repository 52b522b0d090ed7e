"""Coefficient fields A, b, d, V for the three operator cases, with validation.

Every preset is an analytic function of position, so a coefficient set can be
re-evaluated on any grid (``Coefficients.on``), which the whole-space proxy
and the auxiliary-function quadratures rely on.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .grid import NDIM, GridFunction, GridSpec, discrete_gradient

CASES = ("case1", "case2", "case3")
POTENTIAL_KINDS = ("zero", "constant", "radial-power", "anisotropic-quadratic", "log-normal-random", "checkerboard")
MATRIX_KINDS = ("identity", "diagonal", "constant", "log-normal", "checkerboard")
VECTOR_KINDS = ("zero", "constant", "linear", "random-smooth")


class CoefficientError(ValueError):
    """Invalid or inconsistent coefficient description."""


class SmoothRandomField:
    """Stationary unit-variance Gaussian field from random Fourier modes.

    A deterministic continuous function of position for a given seed, so its
    values agree wherever two grids overlap.
    """

    def __init__(self, seed: int, corr_len: float = 0.5, modes: int = 64) -> None:
        rng = np.random.default_rng(seed)
        self.freqs = rng.normal(scale=1.0 / corr_len, size=(modes, NDIM))
        self.phases = rng.uniform(0.0, 2.0 * np.pi, size=modes)
        self.amp = math.sqrt(2.0 / modes)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        flat = x.reshape(-1, NDIM)
        out = np.empty(flat.shape[0])
        step = 65536
        for s in range(0, flat.shape[0], step):
            out[s : s + step] = self.amp * np.cos(flat[s : s + step] @ self.freqs.T + self.phases).sum(axis=1)
        return out.reshape(x.shape[:-1])


def _smooth_checker(x: np.ndarray, lo: float, hi: float, period: float, sharpness: float) -> np.ndarray:
    s = np.prod(np.tanh(sharpness * np.sin(np.pi * x / period)), axis=-1)
    return lo + (hi - lo) * 0.5 * (1.0 + s)


@dataclass(frozen=True)
class PotentialPreset:
    """Scalar potential V(x) given in closed form.

    kinds and parameters:
      constant (value), radial-power (alpha, scale, center: |x - c|^alpha),
      anisotropic-quadratic (coeffs a: sum a_i x_i²), log-normal-random
      (mean, sigma, corr_len, seed), checkerboard (lo, hi, period, sharpness;
      tanh-smoothed), zero.
    """

    kind: str = "constant"
    params: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.kind not in POTENTIAL_KINDS:
            raise CoefficientError(f"unknown potential kind '{self.kind}'; expected one of {POTENTIAL_KINDS}")

    def _get(self, key, default):
        return self.params.get(key, default)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        k = self.kind
        if k == "zero":
            return np.zeros(x.shape[:-1])
        if k == "constant":
            return np.full(x.shape[:-1], float(self._get("value", 1.0)))
        if k == "radial-power":
            c = np.asarray(self._get("center", (0.0, 0.0, 0.0)), dtype=float)
            r = np.linalg.norm(x - c, axis=-1)
            return float(self._get("scale", 1.0)) * r ** float(self._get("alpha", 2.0))
        if k == "anisotropic-quadratic":
            a = np.asarray(self._get("coeffs", (1.0, 2.0, 3.0)), dtype=float)
            return np.sum(a * x**2, axis=-1)
        if k == "log-normal-random":
            g = SmoothRandomField(int(self._get("seed", 0)), float(self._get("corr_len", 0.5)))
            sigma = float(self._get("sigma", 0.5))
            return float(self._get("mean", 1.0)) * np.exp(sigma * g(x) - 0.5 * sigma**2)
        lo, hi = float(self._get("lo", 1.0)), float(self._get("hi", 10.0))
        return _smooth_checker(x, lo, hi, float(self._get("period", 0.5)), float(self._get("sharpness", 4.0)))

    @property
    def is_zero(self) -> bool:
        return self.kind == "zero" or (self.kind == "constant" and float(self._get("value", 1.0)) == 0.0)

    @property
    def is_random(self) -> bool:
        return self.kind == "log-normal-random"

    def ball_integral(self, x: np.ndarray, r: np.ndarray) -> np.ndarray | None:
        """Exact ∫_{B(x,r)} V for polynomial presets, else ``None``.

        ``x`` has shape ``(..., 3)`` and ``r`` broadcasts against ``x[..., 0]``.
        """
        x = np.asarray(x, dtype=float)
        r = np.asarray(r, dtype=float)
        vol = 4.0 * np.pi / 3.0 * r**3
        second = 4.0 * np.pi * r**5 / 15.0  # ∫_{B_r} z_i² dz
        if self.kind == "zero":
            return np.zeros(np.broadcast_shapes(x.shape[:-1], r.shape))
        if self.kind == "constant":
            return float(self._get("value", 1.0)) * vol * np.ones(x.shape[:-1])
        if self.kind == "anisotropic-quadratic":
            a = np.asarray(self._get("coeffs", (1.0, 2.0, 3.0)), dtype=float)
            return vol * np.sum(a * x**2, axis=-1) + second * a.sum()
        if self.kind == "radial-power":
            alpha = float(self._get("alpha", 2.0))
            scale = float(self._get("scale", 1.0))
            c = np.asarray(self._get("center", (0.0, 0.0, 0.0)), dtype=float)
            if alpha == 0.0:
                return scale * vol * np.ones(x.shape[:-1])
            if alpha == 2.0:
                return scale * (vol * np.sum((x - c) ** 2, axis=-1) + 3.0 * second)
            dist = np.linalg.norm(x - c, axis=-1)
            if np.all(dist == 0.0):
                return scale * 4.0 * np.pi * r ** (alpha + 3.0) / (alpha + 3.0) * np.ones(x.shape[:-1])
        return None


def _as_potential(spec: dict | PotentialPreset | None) -> PotentialPreset:
    if spec is None:
        return PotentialPreset("zero")
    if isinstance(spec, PotentialPreset):
        return spec
    spec = dict(spec)
    kind = spec.pop("kind", "constant")
    return PotentialPreset(kind, spec)


def _matrix_field(cfg: dict, pts: np.ndarray) -> np.ndarray:
    """Scalar-system principal part, shape (3, 3, *grid)."""
    kind = cfg.get("kind", "identity")
    shape = pts.shape[:-1]
    eye = np.eye(NDIM).reshape(NDIM, NDIM, *([1] * len(shape)))
    if kind == "identity":
        return float(cfg.get("scale", 1.0)) * np.broadcast_to(eye, (NDIM, NDIM) + shape).copy()
    if kind == "diagonal":
        diag = np.asarray(cfg.get("diag", (1.0, 1.0, 1.0)), dtype=float)
        return np.broadcast_to(np.diag(diag).reshape(NDIM, NDIM, *([1] * len(shape))), (NDIM, NDIM) + shape).copy()
    if kind == "constant":
        mat = np.asarray(cfg["matrix"], dtype=float)
        return np.broadcast_to(mat.reshape(NDIM, NDIM, *([1] * len(shape))), (NDIM, NDIM) + shape).copy()
    if kind == "log-normal":
        # shift * I + exp(sigma g) v v^T : symmetric, smallest eigenvalue exactly shift
        seed = int(cfg.get("seed", 0))
        sigma = float(cfg.get("sigma", 0.5))
        corr = float(cfg.get("corr_len", 0.5))
        shift = float(cfg.get("shift", 0.5))
        g = SmoothRandomField(seed, corr)(pts)
        v = np.stack([SmoothRandomField(seed + 101 + a, corr)(pts) for a in range(NDIM)])
        v /= np.maximum(np.linalg.norm(v, axis=0), 1e-12)
        return shift * eye + np.exp(sigma * g) * (v[:, None] * v[None, :])
    if kind == "checkerboard":
        a = _smooth_checker(pts, float(cfg.get("lo", 1.0)), float(cfg.get("hi", 10.0)),
                            float(cfg.get("period", 0.5)), float(cfg.get("sharpness", 4.0)))
        return eye * a
    raise CoefficientError(f"unknown principal-part kind '{kind}'; expected one of {MATRIX_KINDS}")


def _vector_field(cfg: dict | None, pts: np.ndarray) -> np.ndarray:
    """Scalar-system drift, shape (3, *grid)."""
    cfg = cfg or {"kind": "zero"}
    kind = cfg.get("kind", "zero")
    shape = pts.shape[:-1]
    if kind == "zero":
        return np.zeros((NDIM,) + shape)
    if kind == "constant":
        vec = np.asarray(cfg.get("vector", (0.0, 0.0, 0.0)), dtype=float)
        return np.broadcast_to(vec.reshape(NDIM, *([1] * len(shape))), (NDIM,) + shape).copy()
    if kind == "linear":
        mat = np.asarray(cfg.get("matrix", np.eye(NDIM)), dtype=float)
        return np.moveaxis(pts @ mat.T, -1, 0)
    if kind == "random-smooth":
        seed = int(cfg.get("seed", 0))
        amp = float(cfg.get("amplitude", 0.1))
        corr = float(cfg.get("corr_len", 0.5))
        return amp * np.stack([SmoothRandomField(seed + 7 * a, corr)(pts) for a in range(NDIM)])
    raise CoefficientError(f"unknown drift kind '{kind}'; expected one of {VECTOR_KINDS}")


@dataclass(frozen=True)
class EllipticityResult:
    lambda_est: float
    Lambda_est: float
    witness_node: tuple[int, int, int]
    witness_xi: np.ndarray

    @property
    def ok(self) -> bool:
        return self.lambda_est > 0


@dataclass(frozen=True, eq=False)
class Coefficients:
    """Nodal coefficient tensors.

    Shapes: ``A[alpha, beta, i, j, *grid]``, ``b[alpha, i, j, *grid]``,
    ``d[beta, i, j, *grid]``, ``V[i, j, *grid]``.
    """

    spec: GridSpec
    A: np.ndarray
    b: np.ndarray
    d: np.ndarray
    V: np.ndarray
    case_tag: str
    lambda_: float = 0.0
    Lambda: float = 0.0
    exponents: dict = field(default_factory=dict)
    recipe: dict | None = field(default_factory=dict)
    potential: PotentialPreset | None = None
    meta: dict = field(default_factory=dict)

    @property
    def N(self) -> int:
        return self.V.shape[0]

    @property
    def has_drift(self) -> bool:
        return bool(np.any(self.b) or np.any(self.d))

    @property
    def has_potential(self) -> bool:
        return bool(np.any(self.V))

    def on(self, spec: GridSpec) -> Coefficients:
        """Re-evaluate the same presets on another grid."""
        if self.recipe is None:
            raise CoefficientError("coefficients were modified after construction and cannot be re-evaluated")
        return preset_case(spec, self.case_tag, self.recipe)

    def scaled(self, c: float) -> Coefficients:
        return replace(self, A=c * self.A, b=c * self.b, d=c * self.d, V=c * self.V,
                       lambda_=c * self.lambda_, Lambda=c * self.Lambda, recipe=None, meta={**self.meta, "scaled": c})

    def with_shift(self, eps: float, target: str = "V") -> Coefficients:
        """Copy with ``eps * I`` added to V or to A (no recipe: grid-bound)."""
        if target == "V":
            V = self.V + eps * np.eye(self.N).reshape(self.N, self.N, 1, 1, 1)
            return replace(self, V=V, recipe=None, meta={**self.meta, "V_shift": eps})
        eye = np.einsum("ab,ij->abij", np.eye(NDIM), np.eye(self.N)).reshape(NDIM, NDIM, self.N, self.N, 1, 1, 1)
        return replace(self, A=self.A + eps * eye, lambda_=self.lambda_ + eps, recipe=None,
                       meta={**self.meta, "A_shift": eps})

    def scalar_field(self, name: str) -> GridFunction:
        """Diagonal scalar V (N = 1) as a grid function."""
        return GridFunction(self.spec, getattr(self, name)[0, 0])


def _expand_system(field_: np.ndarray, N: int, lead: int, coupling: np.ndarray | None = None) -> np.ndarray:
    """Insert identity (or ``coupling``) component indices after ``lead`` axes."""
    mat = np.eye(N) if coupling is None else coupling
    shape = field_.shape
    f = field_.reshape(shape[:lead] + (1, 1) + shape[lead:])
    m = mat.reshape((1,) * lead + (N, N) + (1,) * (len(shape) - lead))
    return f * m


def nodewise_matrices(c: Coefficients, nodes: np.ndarray | None = None) -> np.ndarray:
    """Principal part as (P, nN, nN) matrices indexed by (alpha, i) x (beta, j)."""
    N = c.N
    A = c.A.reshape(NDIM, NDIM, N, N, -1)
    if nodes is not None:
        A = A[..., nodes]
    # (alpha, beta, i, j, P) -> (P, alpha, i, beta, j)
    return np.transpose(A, (4, 0, 2, 1, 3)).reshape(-1, NDIM * N, NDIM * N)


def check_ellipticity(c: Coefficients, trials: int = 100, seed: int = 0, node_sample: int | None = None) -> EllipticityResult:
    """Sampled ellipticity lower bound and nodewise Frobenius upper bound.

    The trial set is the canonical basis of R^{nN} plus ``trials`` random
    vectors, evaluated at every masked node (or a seeded ``node_sample``).
    """
    if trials < 100:
        raise CoefficientError("ellipticity check needs at least 100 random trial vectors")
    rng = np.random.default_rng(seed)
    nodes = c.spec.dof_nodes
    if node_sample is not None and node_sample < nodes.size:
        nodes = np.sort(rng.choice(nodes, size=node_sample, replace=False))
    dim = NDIM * c.N
    xi = np.vstack([np.eye(dim), rng.normal(size=(trials, dim))])
    xi /= np.linalg.norm(xi, axis=1, keepdims=True)
    mats = nodewise_matrices(c, nodes)
    lam, arg = math.inf, (0, 0)
    for s in range(0, mats.shape[0], 8192):
        q = np.sum((mats[s : s + 8192] @ xi.T) * xi.T[None], axis=1)
        i = np.unravel_index(np.argmin(q), q.shape)
        if q[i] < lam:
            lam, arg = float(q[i]), (s + i[0], i[1])
    frob = np.sqrt(np.sum(c.A.reshape(-1, c.spec.n_nodes)[:, c.spec.dof_nodes] ** 2, axis=0))
    node = tuple(int(v) for v in np.unravel_index(nodes[arg[0]], c.spec.shape))
    return EllipticityResult(lam, float(frob.max()), node, xi[arg[1]])


def _divergence(spec: GridSpec, vec: np.ndarray) -> np.ndarray:
    grad = discrete_gradient(GridFunction(spec, vec)).values
    return grad[0 * NDIM + 0] + grad[1 * NDIM + 1] + grad[2 * NDIM + 2]


def check_sign_conditions(c: Coefficients, delta: float = 0.0) -> dict:
    """Nodewise minima of V - div b, V - div d and V - (div b + div d)/2.

    Negative minima are findings, not errors. Only the scalar case is covered.
    """
    if c.N != 1:
        raise CoefficientError("sign conditions are defined for scalar equations only")
    spec = c.spec
    V = c.V[0, 0]
    div_b = _divergence(spec, c.b[:, 0, 0])
    div_d = _divergence(spec, c.d[:, 0, 0])
    mask = spec.omega_mask
    out = {}
    for name, fld in (("V-div_b", V - div_b), ("V-div_d", V - div_d), ("V-half_div_bd", V - 0.5 * (div_b + div_d))):
        vals = np.where(mask, fld, np.inf)
        idx = np.unravel_index(np.argmin(vals), vals.shape)
        out[name] = {"min": float(vals[idx]), "witness": [int(i) for i in idx]}
    out["coercive_sign"] = out["V-half_div_bd"]["min"] >= delta
    out["supersolution_sign"] = out["V-div_b"]["min"] >= 0.0 and out["V-div_d"]["min"] >= 0.0
    return out


def _check_exponents(case_tag: str, exps: dict) -> dict:
    n = NDIM
    p = float(exps.get("p", math.inf))
    s = float(exps.get("s", math.inf))
    t = float(exps.get("t", math.inf))
    if case_tag == "case2" and not (p > n / 2 and s > n and t > n):
        raise CoefficientError(f"case2 needs p > n/2 and s, t > n; got p={p}, s={s}, t={t}")
    if case_tag == "case3" and not p >= n / 2:
        raise CoefficientError(f"case3 needs a reverse Hölder exponent p >= n/2; got {p}")
    return {"p": p, "s": s, "t": t}


def preset_case(spec: GridSpec, case_tag: str, params: dict | None = None) -> Coefficients:
    """Build coefficients for ``case1`` (pure principal part), ``case2``
    (lower-order terms under a coercivity rule) or ``case3`` (reverse Hölder
    potential, no drift).

    params keys: ``N``, ``A``, ``b``, ``d``, ``V`` (preset dicts), ``exponents``,
    and for case2 ``coercivity`` in {"sign", "small-drift", "none"} with
    ``delta``. For case3 with N > 1, ``V_matrix`` is the fixed SPD factor M.
    """
    if case_tag not in CASES:
        raise CoefficientError(f"unknown case '{case_tag}'; expected one of {CASES}")
    params = dict(params or {})
    N = int(params.get("N", 1))
    if N < 1:
        raise CoefficientError("N must be positive")
    pts = spec.points
    a_cfg = params.get("A", {"kind": "identity"})
    b_cfg = params.get("b")
    d_cfg = params.get("d")
    pot = _as_potential(params.get("V"))
    exps = _check_exponents(case_tag, params.get("exponents", {}))

    if case_tag == "case1" and (not pot.is_zero or (b_cfg or {}).get("kind", "zero") != "zero"
                                or (d_cfg or {}).get("kind", "zero") != "zero"):
        raise CoefficientError("case1 requires b = d = V = 0")
    if case_tag == "case3":
        if (b_cfg or {}).get("kind", "zero") != "zero" or (d_cfg or {}).get("kind", "zero") != "zero":
            raise CoefficientError("case3 requires b = d = 0")
        if pot.is_zero:
            raise CoefficientError("case3 requires a nontrivial potential")

    A = _expand_system(_matrix_field(a_cfg, pts), N, 2)
    bs = _vector_field(b_cfg, pts)
    ds = _vector_field(d_cfg, pts)
    Vs = pot(pts)
    meta: dict = {}

    if case_tag == "case3":
        if np.any(Vs[spec.omega_mask] < 0):
            raise CoefficientError("case3 potential must be nonnegative")
        M = np.asarray(params.get("V_matrix", np.eye(N)), dtype=float)
        eig = np.linalg.eigvalsh(0.5 * (M + M.T))
        if eig.min() <= 0:
            raise CoefficientError("case3 matrix factor must be positive definite")
        meta["c1_c2"] = [float(eig.min()), float(eig.max())]
        V = _expand_system(Vs, N, 0, M)
    else:
        V = _expand_system(Vs, N, 0)

    if case_tag == "case2":
        rule = params.get("coercivity", "sign" if (b_cfg or d_cfg) else "none")
        delta = float(params.get("delta", 0.0))
        scale = 1.0
        if rule == "sign":
            sdiv = 0.5 * (_divergence(spec, bs) + _divergence(spec, ds))
            mask = spec.omega_mask
            if np.any(Vs[mask] < delta):
                raise CoefficientError("sign-coercive case2 needs V >= delta on the domain")
            pos = mask & (sdiv > 0)
            if pos.any():
                scale = min(1.0, float(np.min((Vs[pos] - delta) / sdiv[pos])))
        elif rule == "small-drift":
            lam0 = float(np.min(np.linalg.eigvalsh(nodewise_matrices(
                Coefficients(spec, A, 0 * bs, 0 * ds, V, case_tag), spec.dof_nodes))))
            vmin = float(Vs[spec.omega_mask].min())
            if vmin <= 0:
                raise CoefficientError("small-drift case2 needs a positive potential")
            size = float(np.linalg.norm(bs, axis=0).max() + np.linalg.norm(ds, axis=0).max())
            budget = math.sqrt(lam0 * vmin)  # keeps half of min(lambda, V) after Young's inequality
            if size > budget:
                scale = budget / size
        elif rule != "none":
            raise CoefficientError(f"unknown case2 coercivity rule '{rule}'")
        bs, ds = scale * bs, scale * ds
        meta.update({"coercivity": rule, "drift_scale": scale, "delta": delta})

    b = _expand_system(bs, N, 1)
    d = _expand_system(ds, N, 1)
    coeffs = Coefficients(spec, A, b, d, V, case_tag, exponents=exps, recipe=params,
                          potential=pot if not pot.is_zero else None, meta=meta)
    sample = None if spec.n_mask <= 200_000 else 200_000
    ell = check_ellipticity(coeffs, node_sample=sample)
    if not ell.ok:
        raise CoefficientError(f"ellipticity fails: lambda_est={ell.lambda_est} at node {ell.witness_node}")
    return replace(coeffs, lambda_=ell.lambda_est, Lambda=ell.Lambda_est)
