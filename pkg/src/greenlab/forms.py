"""Sparse realization of the bilinear form, its adjoint, and the Γ/γ estimators.

Quadrature: every grid node carries weight h³. Unknowns live on masked nodes;
all other nodes hold zero, and differences are zero-padded past the grid.

    B_h[u, v] = Σ h³ [ ½ Σ_± A^{αα} D^±_α u · D^±_α v  +  Σ_{α≠β} A^{αβ} D^c_β u · D^c_α v
                      + b^α u · D^c_α v + d^β D^c_β u · v + V u · v ]

This is the average over the eight one-sided difference octants of the full
principal part, so the nodewise ellipticity of A carries over to the discrete
energy, and diagonal A yields a 7-point stencil. Every term shares one
quadrature, so the adjoint form is the exact transpose.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .coefficients import Coefficients
from .grid import NDIM, GridFunction, GridSpec

NORM_KINDS = ("Y12", "W12", "WV12")


class FormError(ValueError):
    """Invalid assembly request."""


def _shift_operator(spec: GridSpec, axis: int) -> sp.csr_matrix:
    """S with (S u)(x) = u(x + e_axis), zero past the last node."""
    mats = [sp.identity(d, format="csr") for d in spec.dims]
    mats[axis] = sp.diags([np.ones(spec.dims[axis] - 1)], [1], format="csr")
    out = mats[0]
    for m in mats[1:]:
        out = sp.kron(out, m, format="csr")
    return out


@dataclass(frozen=True)
class DifferenceOperators:
    """Forward, backward and centered differences on the whole node lattice."""

    forward: tuple
    backward: tuple
    centered: tuple

    @classmethod
    def build(cls, spec: GridSpec) -> DifferenceOperators:
        eye = sp.identity(spec.n_nodes, format="csr")
        fw, bw, ce = [], [], []
        for a in range(NDIM):
            s = _shift_operator(spec, a)
            f = ((s - eye) / spec.h).tocsr()
            b = ((eye - s.T) / spec.h).tocsr()
            fw.append(f)
            bw.append(b)
            ce.append(((f + b) * 0.5).tocsr())
        return cls(tuple(fw), tuple(bw), tuple(ce))


def _diag(values: np.ndarray) -> sp.dia_matrix:
    return sp.diags(values.ravel())


def _restrict(spec: GridSpec, op: sp.spmatrix) -> sp.csr_matrix:
    idx = spec.dof_nodes
    return op.tocsr()[idx][:, idx].tocsr()


def _energy(spec: GridSpec, ops: DifferenceOperators, weight: np.ndarray | None = None) -> sp.csr_matrix:
    """½ Σ_α Σ_± D^±ᵀ W D^± over the full lattice (W = h³·weight)."""
    w = spec.h**3 * (np.ones(spec.shape) if weight is None else weight)
    W = _diag(w)
    out = sp.csr_matrix((spec.n_nodes, spec.n_nodes))
    for a in range(NDIM):
        out = out + 0.5 * (ops.forward[a].T @ W @ ops.forward[a] + ops.backward[a].T @ W @ ops.backward[a])
    return out.tocsr()


def _block(blocks: list[list[sp.spmatrix | None]]) -> sp.csr_matrix:
    return sp.bmat(blocks, format="csr")


@dataclass(frozen=True, eq=False)
class AssembledForm:
    """Matrix of the form over trace-zero dofs, component-major.

    ``matrix[r, c]`` pairs the test dof ``r`` with the trial dof ``c``, so
    B[u, v] = vᵀ·matrix·u and a Green column solves matrix·v = w.
    """

    spec: GridSpec
    matrix: sp.csr_matrix
    norm_kind: str
    gram: sp.csr_matrix
    coefficients: Coefficients | None = None
    N: int = 1
    adjoint_of: AssembledForm | None = None
    m_field: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    @property
    def n_dof(self) -> int:
        return self.matrix.shape[0]

    def adjoint(self) -> AssembledForm:
        """The form B*[u, v] = B[v, u]: the transposed matrix."""
        if self.adjoint_of is not None:
            return self.adjoint_of
        return AssembledForm(self.spec, self.matrix.T.tocsr(), self.norm_kind, self.gram,
                             self.coefficients, self.N, adjoint_of=self, m_field=self.m_field,
                             meta={**self.meta, "adjoint": True})

    def asymmetry(self) -> float:
        """max|M - Mᵀ| relative to max|M|."""
        diff = abs(self.matrix - self.matrix.T)
        top = abs(self.matrix).max()
        return float(diff.max() / top) if top > 0 else 0.0

    def is_symmetric(self, tol: float = 1e-12) -> bool:
        return self.asymmetry() <= tol

    def bilinear(self, u: GridFunction, v: GridFunction) -> float:
        """B[u, v] for trace-zero fields."""
        return float(v.to_dofs() @ (self.matrix @ u.to_dofs()))

    def scaled(self, c: float) -> AssembledForm:
        return AssembledForm(self.spec, (c * self.matrix).tocsr(), self.norm_kind, self.gram,
                             self.coefficients, self.N, m_field=self.m_field, meta={**self.meta, "scaled": c})

    def export_coo(self, path) -> Path:
        """Write ``row col value`` lines (0-based), one nonzero per line."""
        path = Path(path)
        coo = self.matrix.tocoo()
        order = np.lexsort((coo.col, coo.row))
        with path.open("w") as fh:
            fh.write(f"# {coo.shape[0]} {coo.shape[1]} {coo.nnz}\n")
            for r, c, v in zip(coo.row[order], coo.col[order], coo.data[order]):
                fh.write(f"{r} {c} {v:.17g}\n")
        return path


def _lattice_blocks(spec: GridSpec, c: Coefficients, ops: DifferenceOperators):
    """Yield (i, j, block) with each component block on the full node lattice."""
    h3 = spec.h**3
    for i in range(c.N):
        for j in range(c.N):
            acc = sp.csr_matrix((spec.n_nodes, spec.n_nodes))
            for a in range(NDIM):
                for b in range(NDIM):
                    coef = c.A[a, b, i, j]
                    if not np.any(coef):
                        continue
                    W = _diag(h3 * coef)
                    if a == b:
                        acc = acc + 0.5 * (ops.forward[a].T @ W @ ops.forward[a]
                                           + ops.backward[a].T @ W @ ops.backward[a])
                    else:
                        acc = acc + ops.centered[a].T @ W @ ops.centered[b]
                if np.any(c.b[a, i, j]):
                    acc = acc + ops.centered[a].T @ _diag(h3 * c.b[a, i, j])
                if np.any(c.d[a, i, j]):
                    acc = acc + _diag(h3 * c.d[a, i, j]) @ ops.centered[a]
            if np.any(c.V[i, j]):
                acc = acc + _diag(h3 * c.V[i, j])
            if acc.nnz:
                yield i, j, acc.tocsr()


def _symmetric_coefficients(c: Coefficients) -> bool:
    A_sym = np.array_equal(c.A, np.transpose(c.A, (1, 0, 3, 2, 4, 5, 6)))
    return A_sym and np.array_equal(c.b, c.d) and np.array_equal(c.V, np.transpose(c.V, (1, 0, 2, 3, 4)))


def assemble(spec: GridSpec, c: Coefficients, norm_kind: str = "Y12", m_field: np.ndarray | None = None) -> AssembledForm:
    """Assemble B over the trace-zero dofs and the gram matrix of ``norm_kind``.

    ``WV12`` uses the weight m(x, V)²; it is computed from the potential when
    ``m_field`` is not supplied and requires a case3 potential.
    """
    if norm_kind not in NORM_KINDS:
        raise FormError(f"unknown norm kind '{norm_kind}'; expected one of {NORM_KINDS}")
    if c.spec.shape != spec.shape:
        raise FormError("coefficients live on a different grid")
    if norm_kind == "WV12":
        if c.case_tag != "case3" or c.potential is None:
            raise FormError("the W_V^{1,2} norm needs a case3 potential")
        if m_field is None:
            from .auxfun import PotentialProfile, m_field as compute_m

            m_field = compute_m(PotentialProfile.from_coefficients(c)).values[0]

    ops = DifferenceOperators.build(spec)
    N = c.N
    h3 = spec.h**3
    blocks: list[list[sp.spmatrix | None]] = [[None] * N for _ in range(N)]
    for i, j, acc in _lattice_blocks(spec, c, ops):
        blocks[i][j] = _restrict(spec, acc)
    for i in range(N):
        if blocks[i][i] is None:
            blocks[i][i] = sp.csr_matrix((spec.n_mask, spec.n_mask))
    matrix = _block(blocks)
    if _symmetric_coefficients(c):
        # sparse products round differently per entry; the form itself is symmetric
        matrix = ((matrix + matrix.T) * 0.5).tocsr()
    matrix.eliminate_zeros()

    energy = _energy(spec, ops)
    if norm_kind == "W12":
        energy = energy + _diag(np.full(spec.shape, h3))
    elif norm_kind == "WV12":
        energy = energy + _diag(h3 * np.asarray(m_field) ** 2)
    g = _restrict(spec, energy)
    gram = sp.block_diag([g] * N, format="csr")
    return AssembledForm(spec, matrix, norm_kind, gram, c, N, m_field=None if m_field is None else np.asarray(m_field))


@dataclass(frozen=True)
class BoundednessResult:
    Gamma_est: float
    iterations: int
    converged: bool
    vector: np.ndarray


@dataclass(frozen=True)
class CoercivityResult:
    gamma_est: float
    witness: GridFunction
    converged: bool

    @property
    def coercive(self) -> bool:
        return self.gamma_est > 0


def _gram_solver(gram: sp.csr_matrix):
    lu = spla.splu(gram.tocsc())
    return lu.solve


def estimate_boundedness(form: AssembledForm, rtol: float = 1e-10, max_steps: int = 10_000, seed: int = 0) -> BoundednessResult:
    """Largest singular value of the form in the gram geometry.

    Lanczos (ARPACK) on the generalized problem MᵀG⁻¹M x = Γ² G x.
    """
    solve = _gram_solver(form.gram)
    M = form.matrix
    n = form.n_dof
    calls = [0]

    def normal(x):
        calls[0] += 1
        return M.T @ solve(M @ x)

    op = spla.LinearOperator((n, n), matvec=normal, dtype=float)
    minv = spla.LinearOperator((n, n), matvec=solve, dtype=float)
    v0 = np.random.default_rng(seed).normal(size=n)
    if n <= 2:
        dense = np.linalg.solve(form.gram.toarray(), (M.T @ np.linalg.solve(form.gram.toarray(), M.toarray())))
        vals, vecs = np.linalg.eig(dense)
        i = int(np.argmax(vals.real))
        return BoundednessResult(float(np.sqrt(max(vals[i].real, 0.0))), 1, True, vecs[:, i].real)
    try:
        vals, vecs = spla.eigsh(op, k=1, M=form.gram, Minv=minv, which="LA", tol=rtol, maxiter=max_steps, v0=v0)
        converged = True
    except spla.ArpackNoConvergence as exc:
        if len(exc.eigenvalues) == 0:
            return BoundednessResult(math.nan, calls[0], False, v0)
        vals, vecs, converged = exc.eigenvalues, exc.eigenvectors, False
    return BoundednessResult(float(math.sqrt(max(vals[0], 0.0))), calls[0], converged, vecs[:, 0])


def estimate_coercivity(form: AssembledForm, tol: float = 1e-9, maxiter: int = 2000, seed: int = 0) -> CoercivityResult:
    """Smallest generalized eigenvalue of the symmetric part against the gram.

    LOBPCG with the gram inverse as preconditioner.
    """
    S = ((form.matrix + form.matrix.T) * 0.5).tocsr()
    G = form.gram
    solve = _gram_solver(G)
    precond = spla.LinearOperator(G.shape, matvec=solve, dtype=float)
    rng = np.random.default_rng(seed)
    k = min(3, max(1, form.n_dof // 5))
    X = rng.normal(size=(form.n_dof, k))
    with warnings.catch_warnings():
        # convergence is judged from the residual below
        warnings.simplefilter("ignore", UserWarning)
        vals, vecs = spla.lobpcg(S, X, B=G, M=precond, largest=False, tol=tol, maxiter=maxiter)
    i = int(np.argmin(vals))
    vec = vecs[:, i]
    rq = float(vec @ (S @ vec) / (vec @ (G @ vec)))
    resid = np.linalg.norm(S @ vec - rq * (G @ vec)) / max(np.linalg.norm(S @ vec), 1e-300)
    witness = GridFunction.from_dofs(form.spec, vec, form.N)
    return CoercivityResult(rq, witness, bool(resid < 1e-4))


def residual_operator(spec: GridSpec, c: Coefficients) -> sp.csr_matrix:
    """B[u, ·] on trace-zero test dofs for any nodal u (no trace condition).

    Rows are test dofs (component-major over masked nodes), columns are all
    lattice nodes, component-major; apply it to ``u.values.ravel()``.
    """
    ops = DifferenceOperators.build(spec)
    N = c.N
    rows = spec.dof_nodes
    blocks: list[list[sp.spmatrix | None]] = [[None] * N for _ in range(N)]
    for i, j, acc in _lattice_blocks(spec, c, ops):
        blocks[i][j] = acc[rows]
    for i in range(N):
        if blocks[i][i] is None:
            blocks[i][i] = sp.csr_matrix((len(rows), spec.n_nodes))
    out = _block(blocks)
    out.eliminate_zeros()
    return out
