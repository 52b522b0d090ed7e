import json
import math

import numpy as np
import pytest

from greenlab import green, regularity
from greenlab.coefficients import preset_case
from greenlab.forms import assemble
from greenlab.grid import Cutoff, GridFunction, make_grid
from greenlab.regularity import RegularityError
from greenlab.solver import SolveOptions, load_functional, solve_dirichlet, solve_variational

OPTS = SolveOptions(rel_tol=1e-10)


@pytest.fixture(scope="module")
def spec():
    return make_grid((17, 17, 17), 1 / 8)


@pytest.fixture(scope="module")
def laplace(spec):
    return assemble(spec, preset_case(spec, "case1"))


@pytest.fixture(scope="module")
def unit_potential(spec):
    c = preset_case(spec, "case2", {"V": {"kind": "constant", "value": 1.0}})
    return assemble(spec, c, "W12")


def const(spec, c):
    return GridFunction(spec, np.full(spec.shape, float(c)))


def gaussian(spec, center=(0.1, -0.1, 0.0), width=0.3, amp=1.0):
    y = np.asarray(center)
    return GridFunction.from_function(spec, lambda p: amp * np.exp(-np.sum((p - y) ** 2, axis=-1) / width**2))


def linear(spec, a=(1.0, 0.0, 0.0), c0=1.0):
    a = np.asarray(a)
    return GridFunction.from_function(spec, lambda p: c0 + p @ a)


# ---------------------------------------------------------------- residual gate


def test_gate_accepts_harmonic_and_rejects_noise(spec, laplace):
    assert regularity.residual_gate(laplace, linear(spec, (1, -2, 0.5))).ok
    noise = GridFunction(spec, np.random.default_rng(0).normal(size=spec.shape))
    assert not regularity.residual_gate(laplace, noise).ok


def test_gate_one_sided_modes(spec, laplace):
    u = solve_variational(laplace, load_functional(const(spec, 1.0)), OPTS)
    # -Δu = 1 >= 0: a supersolution of the homogeneous problem, not a subsolution
    assert regularity.residual_gate(laplace, u, None, mode="supersolution").ok
    assert not regularity.residual_gate(laplace, u, None, mode="subsolution").ok
    assert regularity.residual_gate(laplace, u, const(spec, 1.0), spec.omega_mask).ok
    with pytest.raises(RegularityError):
        regularity.residual_gate(laplace, u, mode="weak")


# ---------------------------------------------------------------- Caccioppoli


def test_caccioppoli_linear_finite(spec, laplace):
    row = regularity.caccioppoli_ratio(laplace, linear(spec), Cutoff((0, 0, 0), 0.25, 0.5))
    assert np.isfinite(row["ratio"]) and row["ratio"] > 0
    assert row["rhs_source"] == 0.0


def test_caccioppoli_constant_has_zero_lhs(spec, laplace):
    row = regularity.caccioppoli_ratio(laplace, const(spec, 3.0), Cutoff((0, 0, 0), 0.25, 0.5))
    assert row["lhs"] == 0.0 and row["rhs_energy"] > 0 and row["ratio"] == 0.0


def test_caccioppoli_rejects_non_solution(spec, laplace):
    u = GridFunction.from_function(spec, lambda p: np.sum(p**2, axis=-1))
    with pytest.raises(RegularityError):
        regularity.caccioppoli_ratio(laplace, u, Cutoff((0, 0, 0), 0.25, 0.5))


@pytest.mark.parametrize("fixture", ["laplace33", "quadratic33"])
def test_caccioppoli_scale_stability(request, fixture):
    _, form = request.getfixturevalue(fixture)
    h = form.spec.h
    col = green.averaged_green(form, (0, 0, 0), opts=OPTS)
    cuts = [Cutoff((0, 0, 0), a * h, 2 * a * h, "complement") for a in (2, 4, 8)]
    rec = regularity.caccioppoli_check(form, col.values, cuts, opts=OPTS)
    assert rec.verdict == "pass" and rec.details["spread"] <= 4.0


# ---------------------------------------------------------------- de Giorgi


def test_degiorgi_constant_below_bound(spec, unit_potential):
    # Lu = V c = c, so u ≡ c solves with f ≡ c
    K, trace = regularity.degiorgi_sup_bound(unit_potential, const(spec, 2.0), const(spec, 2.0), R=0.5, opts=OPTS)
    assert trace.sup_half == pytest.approx(2.0) and trace.sup_half <= K
    assert regularity.degiorgi_record(K, trace).verdict == "pass"


def test_degiorgi_laplacian_gaussian_source(spec, laplace):
    f = gaussian(spec)
    u = solve_dirichlet(laplace, linear(spec, (0.3, 0.2, -0.4), 0.5), f, OPTS)
    K, trace = regularity.degiorgi_sup_bound(laplace, u, f, R=0.6, opts=OPTS)
    assert regularity.degiorgi_record(K, trace).verdict == "pass"
    assert trace.certified and trace.mu == pytest.approx(16.0)


def test_degiorgi_nonpositive_collapses_to_source_term(spec, laplace):
    f = gaussian(spec, amp=-1.0)
    u = solve_dirichlet(laplace, const(spec, -1.0), f, OPTS)
    assert u.values.max() <= 0.0
    R = 0.5
    K, trace = regularity.degiorgi_sup_bound(laplace, u, f, R=R, opts=OPTS)
    assert trace.C0 == 0.0
    assert K == pytest.approx(R**2 * trace.extra["F"], rel=1e-12)


def test_degiorgi_trace_invariants(tmp_path, spec, laplace):
    f = gaussian(spec, amp=2.0)
    u = solve_dirichlet(laplace, const(spec, 0.2), f, OPTS)
    _, trace = regularity.degiorgi_sup_bound(laplace, u, f, R=0.6, opts=OPTS)
    assert np.all(np.diff(trace.radii) < 0)
    assert np.all(np.diff(trace.levels) >= 0)
    # higher levels on smaller balls see smaller super-level sets
    assert np.all(np.diff(trace.masses) <= 0)
    assert np.all(np.diff(trace.energies) <= 1e-15)
    data = json.loads(trace.to_json(tmp_path / "t.json").read_text())
    assert data["levels"] == pytest.approx(trace.levels) and data["certified"] == trace.certified


def test_degiorgi_preconditions(spec, laplace):
    u = linear(spec)
    with pytest.raises(RegularityError):
        regularity.degiorgi_sup_bound(laplace, u, ell=1.5)
    with pytest.raises(RegularityError):
        regularity.degiorgi_sup_bound(laplace, u, q=0.0)
    c = preset_case(spec, "case2", {"V": {"kind": "constant", "value": -1.0}, "coercivity": "none"})
    with pytest.raises(RegularityError, match="sign condition"):
        regularity.degiorgi_sup_bound(assemble(spec, c, "W12"), u)


# ---------------------------------------------------------------- scale-dependent iteration


def test_moser_without_negative_part_matches_degiorgi(spec, laplace):
    f = gaussian(spec)
    u = solve_dirichlet(laplace, const(spec, 0.5), f, OPTS)
    rec, traces = regularity.moser_bound_general(laplace, u, f, R=0.3, opts=OPTS, mu=16.0)
    K, dg = regularity.degiorgi_sup_bound(laplace, u, f, R=0.3, opts=OPTS)
    assert traces[0].k0 == 0.0 and traces[0].extra["script_C"] == 0.0
    assert traces[0].C0 == pytest.approx(dg.C0, rel=1e-9)
    assert traces[0].bound == pytest.approx(K, rel=1e-9)
    assert not rec.details["V_minus_nonzero"]


def test_moser_negative_potential_constant_grows(spec):
    c = preset_case(spec, "case2", {"V": {"kind": "constant", "value": -1.0}, "coercivity": "none"})
    form = assemble(spec, c, "W12")
    f = gaussian(spec)
    u = solve_dirichlet(form, const(spec, 0.5), f, OPTS)
    rec, traces = regularity.moser_bound_general(form, u, f, R=0.3, opts=OPTS)
    assert rec.details["V_minus_nonzero"]
    assert rec.measured > 1.0 and rec.verdict == "pass"
    assert all(t.extra["script_C"] > 0 for t in traces)


def test_moser_source_free_finite(spec, laplace):
    u = solve_dirichlet(laplace, linear(spec, (0.5, 0.5, 0.0)), None, OPTS)
    rec, traces = regularity.moser_bound_general(laplace, u, None, R=0.3, opts=OPTS)
    assert all(math.isfinite(t.K) and t.certified for t in traces)
    with pytest.raises(RegularityError):
        regularity.moser_bound_general(laplace, u, V_minus=-np.ones(spec.shape))


# ---------------------------------------------------------------- crossover and Harnack


def test_subballs_geometry(spec):
    R = 0.8
    balls = regularity.sample_subballs(spec, (0.1, 0.0, 0.0), R, 50, seed=3)
    for y, r in balls:
        assert 2 * spec.h - 1e-12 <= r <= 3 * R / 8 + 1e-12
        assert np.linalg.norm(y - (0.1, 0.0, 0.0)) + r <= 0.75 * R + 1e-12
    again = regularity.sample_subballs(spec, (0.1, 0.0, 0.0), R, 50, seed=3)
    assert all(np.array_equal(a[0], b[0]) and a[1] == b[1] for a, b in zip(balls, again))
    with pytest.raises(RegularityError):
        regularity.sample_subballs(spec, (0, 0, 0), 2 * spec.h, 5)


def test_bmo_constant_passes_every_q(spec, laplace):
    rec = regularity.bmo_crossover_check(laplace, const(spec, 1.0), R=0.8, opts=OPTS)
    np.testing.assert_allclose(rec.details["worst_product"], 1.0, rtol=1e-12)
    assert rec.measured == pytest.approx(2.0)


def test_bmo_scale_invariance(spec, laplace):
    u = solve_variational(laplace, load_functional(const(spec, 1.0)), OPTS)
    one = regularity.bmo_crossover_check(laplace, u, R=0.8, k=0.01, opts=OPTS)
    two = regularity.bmo_crossover_check(laplace, u.scaled(2.0), R=0.8, k=0.02, opts=OPTS)
    np.testing.assert_allclose(two.details["worst_product"], one.details["worst_product"], rtol=1e-10)
    assert two.measured == one.measured


def test_bmo_green_column(laplace33):
    _, form = laplace33
    col = green.averaged_green(form, (0, 0, 0), opts=OPTS)
    rec = regularity.bmo_crossover_check(form, col.values, R=0.8, opts=OPTS)
    assert rec.measured > 0 and rec.verdict == "pass"


def test_bmo_rejects_negative(spec, laplace):
    with pytest.raises(RegularityError, match="nonnegative"):
        regularity.bmo_crossover_check(laplace, linear(spec, c0=0.0), R=0.8, opts=OPTS)


def test_weak_harnack_constant_and_scaling(spec, laplace):
    rec = regularity.weak_harnack(laplace, const(spec, 3.0), R=0.8, opts=OPTS)
    assert rec.measured == pytest.approx(1.0, rel=1e-12)
    u = solve_variational(laplace, load_functional(const(spec, 1.0)), OPTS)
    one = regularity.weak_harnack(laplace, u, R=0.8, q0=0.5, opts=OPTS)
    two = regularity.weak_harnack(laplace, u.scaled(2.0), R=0.8, q0=0.5, opts=OPTS)
    assert two.measured == pytest.approx(one.measured, rel=1e-12)


def test_weak_harnack_positive_solution(spec, unit_potential):
    f = const(spec, 1.0)
    u = solve_variational(unit_potential, load_functional(f), OPTS)
    rec = regularity.weak_harnack(unit_potential, u, f, R=0.8, opts=OPTS)
    assert math.isfinite(rec.measured) and rec.measured > 0


def test_harnack_constant(spec, laplace):
    rec = regularity.harnack_ratio(laplace, const(spec, 2.0), R=0.6, scales=(1.0, 1.5), opts=OPTS)
    assert [s["ratio"] for s in rec.details["scales"]] == pytest.approx([1.0, 1.0])
    assert rec.measured == pytest.approx(1.0) and rec.verdict == "pass"


def test_harnack_shifted_green_away_from_pole(laplace33):
    _, form = laplace33
    col = green.averaged_green(form, (0, 0, 0), opts=OPTS)
    u = GridFunction(form.spec, col.values.values + 1.0)
    rec = regularity.harnack_ratio(form, u, R=0.3, center=(0.5, 0.0, 0.0), opts=OPTS)
    assert math.isfinite(rec.measured) and rec.measured >= 1.0
    with pytest.raises(RegularityError):
        # the ball reaches the pole, where the column is not a solution
        regularity.harnack_ratio(form, u, R=0.6, center=(0.5, 0.0, 0.0), opts=OPTS)


def test_harnack_quadratic_potential_stable(quadratic33):
    _, form = quadratic33
    f = GridFunction(form.spec, form.spec.omega_mask.astype(float))
    u = solve_variational(form, load_functional(f), OPTS)
    rec = regularity.harnack_ratio(form, u, f, R=0.25, scales=(1.0, 2.0), opts=OPTS)
    assert rec.verdict == "pass" and rec.measured <= 3.0


# ---------------------------------------------------------------- Hölder


def test_holder_linear_is_lipschitz(laplace33):
    _, form = laplace33
    rec = regularity.holder_exponent(form, linear(form.spec), R0=0.5, min_radius_cells=2, opts=OPTS)
    assert rec.measured == pytest.approx(1.0, abs=1e-9)
    assert rec.details["theta"] == pytest.approx(0.5, abs=1e-9)


def test_holder_constant_degenerate(laplace33):
    _, form = laplace33
    rec = regularity.holder_exponent(form, const(form.spec, 1.0), R0=0.5, min_radius_cells=2, opts=OPTS)
    assert rec.verdict == "report" and rec.details["degenerate"] and math.isnan(rec.measured)


def test_holder_too_few_levels(laplace33):
    _, form = laplace33
    with pytest.raises(RegularityError, match="dyadic"):
        regularity.holder_exponent(form, linear(form.spec), R0=0.5, opts=OPTS)


def test_holder_checkerboard_reported(spec33):
    c = preset_case(spec33, "case1", {"A": {"kind": "checkerboard", "lo": 1, "hi": 10, "period": 0.25}})
    form = assemble(spec33, c)
    u = solve_dirichlet(form, linear(spec33, (1.0, 1.0, 0.0)), None, OPTS)
    rec = regularity.holder_exponent(form, u, R0=0.5, min_radius_cells=2, opts=OPTS)
    assert np.isfinite(rec.measured) and rec.measured > 0
    assert np.isfinite(rec.details["C_pairs"])
