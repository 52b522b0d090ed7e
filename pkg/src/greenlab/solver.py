"""Krylov (or direct) solution of the discrete variational problems M v = F."""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse.linalg as spla

from .forms import AssembledForm
from .grid import GridFunction

log = logging.getLogger(__name__)

METHODS = ("auto", "CG", "BiCGStab", "direct")
PRECONDITIONERS = ("none", "jacobi", "ilu")


class SolverError(RuntimeError):
    """Breakdown, stagnation or a refused configuration."""

    def __init__(self, message: str, diagnostics: dict | None = None) -> None:
        super().__init__(message)
        self.diagnostics = diagnostics or {}


@dataclass(frozen=True)
class SolveOptions:
    """Solver configuration.

    ``max_iter=None`` means 20·dof^{1/3}·100. ``method="auto"`` picks CG for
    symmetric matrices and BiCGStab otherwise; ``direct`` uses a sparse LU.
    """

    rel_tol: float = 1e-10
    max_iter: int | None = None
    method: str = "auto"
    preconditioner: str = "jacobi"
    verify_coercivity: bool = False

    def __post_init__(self) -> None:
        if not (0 < self.rel_tol <= 1e-4):
            raise ValueError(f"rel_tol must lie in (0, 1e-4], got {self.rel_tol}")
        if self.method not in METHODS:
            raise ValueError(f"unknown method '{self.method}'; expected one of {METHODS}")
        if self.preconditioner not in PRECONDITIONERS:
            raise ValueError(f"unknown preconditioner '{self.preconditioner}'")

    def iteration_cap(self, n_dof: int) -> int:
        return self.max_iter or int(20 * round(n_dof ** (1 / 3)) * 100)


@dataclass
class SolveDiagnostics:
    method: str
    iterations: int = 0
    residual: float = math.nan
    info: int = 0
    extra: dict = field(default_factory=dict)


def _preconditioner(form: AssembledForm, kind: str):
    A = form.matrix
    if kind == "none":
        return None
    if kind == "jacobi":
        diag = A.diagonal()
        if np.any(diag == 0):
            raise SolverError("Jacobi preconditioner needs a nonzero diagonal")
        inv = 1.0 / diag
        return spla.LinearOperator(A.shape, matvec=lambda x: inv * x, dtype=float)
    ilu = spla.spilu(A.tocsc(), drop_tol=1e-4, fill_factor=10)
    return spla.LinearOperator(A.shape, matvec=ilu.solve, dtype=float)


_LU_CACHE: dict[int, tuple] = {}


def _direct_solve(form: AssembledForm, rhs: np.ndarray) -> np.ndarray:
    # an adjoint shares its parent's factor through a transposed solve
    base = form.adjoint_of if form.meta.get("adjoint") and form.adjoint_of is not None else form
    trans = "T" if base is not form else "N"
    key = id(base.matrix)
    cached = _LU_CACHE.get(key)
    if cached is None or cached[0] is not base.matrix:
        _LU_CACHE.clear()
        # the stencils are structurally symmetric, so minimum degree on Aᵀ + A beats COLAMD
        cached = (base.matrix, spla.splu(base.matrix.tocsc(), permc_spec="MMD_AT_PLUS_A"))
        _LU_CACHE[key] = cached
    x = cached[1].solve(rhs, trans=trans)
    # one refinement step against the sparse factor's rounding
    return x + cached[1].solve(rhs - form.matrix @ x, trans=trans)


def solve_dofs(form: AssembledForm, rhs: np.ndarray, opts: SolveOptions | None = None) -> tuple[np.ndarray, SolveDiagnostics]:
    """Solve ``form.matrix @ x = rhs`` on the dof vector level."""
    opts = opts or SolveOptions()
    rhs = np.asarray(rhs, dtype=float)
    bnorm = float(np.linalg.norm(rhs))
    if opts.verify_coercivity:
        from .forms import estimate_coercivity

        gamma = estimate_coercivity(form).gamma_est
        if gamma <= 0:
            warnings.warn(f"form is not coercive (gamma_est={gamma:.3e}); solving anyway", RuntimeWarning, stacklevel=2)
    method = opts.method
    symmetric = form.is_symmetric()
    if method == "auto":
        method = "CG" if symmetric else "BiCGStab"
    if method == "CG" and not symmetric:
        raise SolverError("CG refused: matrix is not symmetric within 1e-12",
                          {"asymmetry": form.asymmetry()})
    diag = SolveDiagnostics(method)
    if bnorm == 0.0:
        diag.residual = 0.0
        return np.zeros_like(rhs), diag
    if method == "direct":
        x = _direct_solve(form, rhs)
        diag.residual = float(np.linalg.norm(form.matrix @ x - rhs) / bnorm)
        return x, diag

    counter = {"n": 0}

    def _count(_):
        counter["n"] += 1

    M = _preconditioner(form, opts.preconditioner)
    krylov = spla.cg if method == "CG" else spla.bicgstab
    cap = opts.iteration_cap(form.n_dof)
    x, info = krylov(form.matrix, rhs, rtol=opts.rel_tol, atol=0.0, maxiter=cap, M=M, callback=_count)
    res = float(np.linalg.norm(form.matrix @ x - rhs) / bnorm)
    diag.iterations, diag.residual, diag.info = counter["n"], res, int(info)
    if res > opts.rel_tol and info == 0:
        # preconditioned residual met the target but the true one did not: restart once
        x, info = krylov(form.matrix, rhs, x0=x, rtol=opts.rel_tol * 0.1, atol=0.0, maxiter=cap, M=M, callback=_count)
        res = float(np.linalg.norm(form.matrix @ x - rhs) / bnorm)
        diag.iterations, diag.residual, diag.info = counter["n"], res, int(info)
    if not np.all(np.isfinite(x)):
        raise SolverError(f"{method} diverged", vars(diag))
    if res > opts.rel_tol:
        raise SolverError(f"{method} stopped at relative residual {res:.3e} > {opts.rel_tol:.1e} "
                          f"after {diag.iterations} iterations (info={info})", vars(diag))
    log.debug("%s converged in %d iterations, residual %.3e", method, diag.iterations, res)
    return x, diag


def solve_variational(form: AssembledForm, rhs: GridFunction | np.ndarray, opts: SolveOptions | None = None) -> GridFunction:
    """Trace-zero v with B[v, φ] = F(φ) for all trace-zero φ.

    ``rhs`` is the functional: either a grid function of nodal weights (the
    action is the nodal sum ``Σ F·φ``) or its dof vector.
    """
    vec = rhs.to_dofs() if isinstance(rhs, GridFunction) else np.asarray(rhs, dtype=float)
    x, _ = solve_dofs(form, vec, opts)
    return GridFunction.from_dofs(form.spec, x, form.N)


def load_functional(f: GridFunction) -> GridFunction:
    """Nodal weights of φ ↦ ∫ f·φ under the h³ assembly quadrature."""
    return GridFunction(f.spec, f.values * f.spec.h**3 * f.spec.omega_mask, trace_zero=True)


def solve_dirichlet(form: AssembledForm, boundary: GridFunction, f: GridFunction | None = None,
                    opts: SolveOptions | None = None) -> GridFunction:
    """u with u = ``boundary`` off the mask and B[u, φ] = ∫ f φ for trace-zero φ.

    Writes u = g + w with g the boundary values (zero on the mask) and solves
    for the trace-zero correction w.
    """
    from .forms import residual_operator

    spec = form.spec
    if form.meta.get("adjoint") or form.coefficients is None:
        raise SolverError("boundary-data solves need an assembled (non-adjoint) form with coefficients")
    g = np.where(spec.omega_mask, 0.0, boundary.values)
    rhs = -(residual_operator(spec, form.coefficients) @ g.ravel())
    if f is not None:
        rhs = rhs + load_functional(f).to_dofs()
    w, _ = solve_dofs(form, rhs, opts)
    return GridFunction(spec, g + GridFunction.from_dofs(spec, w, form.N).values)
