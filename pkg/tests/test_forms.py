import numpy as np
import pytest
import scipy.linalg as sla
from hypothesis import given, settings
from hypothesis import strategies as st

from greenlab.coefficients import preset_case
from greenlab.forms import FormError, assemble, estimate_boundedness, estimate_coercivity, residual_operator
from greenlab.grid import GridFunction, make_grid


@pytest.fixture(scope="module")
def small():
    return make_grid((9, 9, 9), 1 / 8, origin=(0.0, 0.0, 0.0))


def _dense_gamma(form):
    M = form.matrix.toarray()
    G = form.gram.toarray()
    S = 0.5 * (M + M.T)
    return float(sla.eigh(S, G, eigvals_only=True)[0])


def _dense_Gamma(form):
    M = form.matrix.toarray()
    L = np.linalg.cholesky(form.gram.toarray())
    Li = np.linalg.inv(L)
    return float(np.linalg.svd(Li @ M @ Li.T, compute_uv=False)[0])


def test_laplacian_is_seven_point_stencil(small):
    form = assemble(small, preset_case(small, "case1"))
    M = form.matrix.toarray()
    h = small.h
    np.testing.assert_allclose(np.diag(M), 6 * h)
    off = M - np.diag(np.diag(M))
    assert set(np.round(np.unique(off) / h, 12)) <= {-1.0, 0.0}
    assert np.all((off != 0).sum(axis=1) <= 6)


def test_laplacian_action_matches_minus_laplacian():
    spec = make_grid((17, 17, 17), 1 / 16, origin=(0.0, 0.0, 0.0))
    form = assemble(spec, preset_case(spec, "case1"))
    u = GridFunction.from_function(spec, lambda p: np.prod(p * (1 - p), axis=-1))

    def lap(p):
        q = p * (1 - p)
        return 2 * (q[..., 1] * q[..., 2] + q[..., 0] * q[..., 2] + q[..., 0] * q[..., 1])

    exact = GridFunction.from_function(spec, lap, trace_zero=True).to_dofs() * spec.h**3
    np.testing.assert_allclose(form.matrix @ u.masked().to_dofs(), exact, atol=1e-14)


def test_symmetric_form_exactly_symmetric(small):
    c = preset_case(small, "case2", {"V": {"kind": "radial-power", "alpha": 2},
                                     "A": {"kind": "log-normal", "seed": 1}})
    form = assemble(small, c, "W12")
    assert abs(form.matrix - form.matrix.T).max() == 0.0


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_adjoint_identity(seed):
    spec = make_grid((9, 9, 9), 1 / 8)
    c = preset_case(spec, "case2", {"V": {"kind": "constant", "value": 2.0}, "coercivity": "none",
                                    "b": {"kind": "random-smooth", "seed": 1, "amplitude": 0.5},
                                    "d": {"kind": "random-smooth", "seed": 2, "amplitude": 0.5}})
    form = assemble(spec, c, "W12")
    adj = form.adjoint()
    rng = np.random.default_rng(seed)
    u = GridFunction.from_dofs(spec, rng.normal(size=form.n_dof))
    v = GridFunction.from_dofs(spec, rng.normal(size=form.n_dof))
    scale = abs(form.bilinear(u, u)) + abs(form.bilinear(v, v)) + 1.0
    assert abs(form.bilinear(v, u) - adj.bilinear(u, v)) <= 1e-12 * scale


def test_laplacian_boundedness_against_y12_gram(small):
    form = assemble(small, preset_case(small, "case1"), "Y12")
    est = estimate_boundedness(form)
    assert est.converged
    assert est.Gamma_est <= 1.0 + 1e-6
    assert est.Gamma_est == pytest.approx(_dense_Gamma(form), rel=1e-6)


def test_boundedness_homogeneous(small):
    c = preset_case(small, "case2", {"V": {"kind": "constant", "value": 1.0},
                                     "b": {"kind": "constant", "vector": [0.1, 0, 0]}})
    form = assemble(small, c, "W12")
    one = estimate_boundedness(form).Gamma_est
    two = estimate_boundedness(form.scaled(2.0)).Gamma_est
    assert two == pytest.approx(2 * one, rel=1e-12)
    assert one == pytest.approx(_dense_Gamma(form), rel=1e-5)


def test_case3_boundedness_reported(small):
    c = preset_case(small, "case3", {"V": {"kind": "constant", "value": 1.0}})
    form = assemble(small, c, "WV12")
    est = estimate_boundedness(form)
    assert np.isfinite(est.Gamma_est)
    assert est.Gamma_est == pytest.approx(_dense_Gamma(form), rel=1e-5)


def test_laplacian_coercive_in_y12(small):
    form = assemble(small, preset_case(small, "case1"), "Y12")
    res = estimate_coercivity(form)
    assert res.coercive
    assert res.gamma_est == pytest.approx(_dense_gamma(form), rel=1e-6)


def test_w12_coercivity_lower_bound(small):
    c = preset_case(small, "case2", {"V": {"kind": "constant", "value": 1.0}})
    form = assemble(small, c, "W12")
    res = estimate_coercivity(form)
    assert res.gamma_est >= min(c.lambda_, 1.0) * (1 - 1e-6)
    assert res.gamma_est == pytest.approx(_dense_gamma(form), rel=1e-6)


@pytest.mark.parametrize("eps", [0.0, 0.05, 0.1])
def test_small_drift_coercive(small, eps):
    c = preset_case(small, "case2", {"V": {"kind": "constant", "value": 1.0}, "coercivity": "none",
                                     "b": {"kind": "constant", "vector": [eps, 0, 0]}})
    form = assemble(small, c, "W12")
    assert estimate_coercivity(form).gamma_est > 0
    assert _dense_gamma(form) > 0


def test_shift_raises_coercivity(small):
    c = preset_case(small, "case2", {"V": {"kind": "constant", "value": 1.0}})
    eps = 0.5
    base = estimate_coercivity(assemble(small, c, "W12")).gamma_est
    shifted = estimate_coercivity(assemble(small, c.with_shift(eps), "W12")).gamma_est
    # W^{1,2} gram dominates the L2 part, so the raise is at least eps times the L2 share
    assert shifted >= base
    assert _dense_gamma(assemble(small, c.with_shift(eps), "W12")) == pytest.approx(shifted, rel=1e-6)


def test_wv12_needs_potential(small):
    with pytest.raises(FormError):
        assemble(small, preset_case(small, "case1"), "WV12")
    with pytest.raises(FormError):
        assemble(small, preset_case(small, "case1"), "H1")


def test_residual_operator_restricts_to_matrix(small):
    c = preset_case(small, "case2", {"V": {"kind": "constant", "value": 1.0},
                                     "b": {"kind": "random-smooth", "seed": 3}})
    form = assemble(small, c, "W12")
    R = residual_operator(small, c)
    u = GridFunction.from_dofs(small, np.random.default_rng(0).normal(size=form.n_dof))
    np.testing.assert_array_equal(R @ u.values.ravel(), form.matrix @ u.to_dofs())


def test_residual_operator_linear_is_harmonic():
    spec = make_grid((9, 9, 9), 1 / 8)
    c = preset_case(spec, "case1")
    u = GridFunction.from_function(spec, lambda p: 1 + p[..., 0] - 2 * p[..., 2])
    assert np.abs(residual_operator(spec, c) @ u.values.ravel()).max() <= 1e-15


def test_export_coo(tmp_path, small):
    form = assemble(small, preset_case(small, "case1"))
    path = form.export_coo(tmp_path / "m.coo")
    lines = path.read_text().splitlines()
    assert lines[0] == f"# {form.n_dof} {form.n_dof} {form.matrix.nnz}"
    assert len(lines) == form.matrix.nnz + 1
