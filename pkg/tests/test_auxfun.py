import math

import numpy as np
import pytest
from scipy import integrate, optimize

from greenlab import auxfun
from greenlab.coefficients import PotentialPreset
from greenlab.grid import make_grid

M_UNIT = math.sqrt(4 * math.pi / 3)


@pytest.fixture(scope="module")
def spec():
    return make_grid((17, 17, 17), 1 / 8)


def profile(spec, kind, **params):
    return auxfun.PotentialProfile.from_preset(spec, PotentialPreset(kind, params))


def test_psi_constant_potential(spec):
    prof = profile(spec, "constant", value=1.0)
    for r in (4 * spec.h, 0.5, 0.75):
        exact = 4 * math.pi / 3 * r**2
        assert auxfun.psi(prof, (0.0, 0.0, 0.0), r) == pytest.approx(exact, rel=1e-12)
        assert auxfun.psi(prof, (0.0, 0.0, 0.0), r, "quadrature") == pytest.approx(exact, rel=1e-10)
        if r >= 6 * spec.h:
            # plain node counting carries the lattice-point error, about 4% at 4h
            assert auxfun.psi(prof, (0.0, 0.0, 0.0), r, "nodes") == pytest.approx(exact, rel=0.03)


def test_psi_zero_potential(spec):
    assert auxfun.psi(profile(spec, "zero"), (0.1, 0.2, 0.0), 0.5) == 0.0


def test_psi_quadratic_at_origin(spec):
    # r^{-1} ∫_0^r 4π s^4 ds
    prof = profile(spec, "radial-power", alpha=2)
    for r in (0.25, 0.5, 1.0):
        assert auxfun.psi(prof, (0.0, 0.0, 0.0), r) == pytest.approx(4 * math.pi / 5 * r**4, rel=1e-12)
        assert auxfun.psi(prof, (0.0, 0.0, 0.0), r, "quadrature") == pytest.approx(4 * math.pi / 5 * r**4, rel=1e-8)


def test_m_constant_and_scaling(spec):
    one = auxfun.m_of_x(profile(spec, "constant", value=1.0), (0.0, 0.0, 0.0))
    assert one == pytest.approx(M_UNIT, abs=1e-6)
    four = auxfun.m_of_x(profile(spec, "constant", value=4.0), (0.3, -0.2, 0.1))
    assert four == pytest.approx(2 * one, rel=1e-8)


def test_m_quadratic_off_center_against_radial_quadrature(spec):
    x = np.array([2.0, 0.0, 0.0])

    def ball_mass(r):
        # ∫_{B_r(x)} |y|^2 by shells around x: the shell average of |x + s ω|² is |x|² + s²
        return integrate.quad(lambda s: 4 * math.pi * s**2 * (x @ x + s**2), 0.0, r, epsabs=1e-14)[0]

    r_star = optimize.brentq(lambda r: ball_mass(r) / r - 1.0, 1e-6, 10.0, xtol=1e-15)
    m = auxfun.m_of_x(profile(spec, "radial-power", alpha=2), x)
    assert m == pytest.approx(1.0 / r_star, rel=1e-6)


@pytest.mark.parametrize("kind,params", [("constant", {"value": 1.0}), ("radial-power", {"alpha": 2}),
                                         ("checkerboard", {"lo": 1, "hi": 10}),
                                         ("log-normal-random", {"seed": 3})])
def test_m_field_residual(spec, kind, params):
    if kind == "log-normal-random":
        spec = make_grid((9, 9, 9), 1 / 4)
    prof = profile(spec, kind, **params)
    assert auxfun.psi_residual(prof, auxfun.m_field(prof)) <= 1e-6


def test_bp_constant_oracles():
    spec = make_grid((33, 33, 33), 1 / 16)
    assert auxfun.bp_constant(profile(spec, "constant", value=1.0), 2.0, 200).constant == pytest.approx(1.0, abs=1e-12)
    balls = auxfun.sample_balls(spec, 200, seed=1, origin_centered=True)
    quad = auxfun.bp_constant(profile(spec, "radial-power", alpha=2), 2.0, balls)
    exact = 5 / 3 * math.sqrt(3 / 7)
    assert quad.constant == pytest.approx(exact, abs=0.02)
    np.testing.assert_allclose(quad.ratios, exact, rtol=1e-6)


def test_bp_checkerboard_grows_with_p(spec):
    prof = profile(spec, "checkerboard", lo=1, hi=10)
    vals = [auxfun.bp_constant(prof, p, 200, seed=2).constant for p in (1.5, 2.0, 4.0)]
    assert all(np.isfinite(vals))
    assert vals[0] <= vals[1] <= vals[2]


def test_bp_ball_floor(spec):
    with pytest.raises(auxfun.AuxError):
        auxfun.bp_constant(profile(spec, "constant"), 2.0, 10)


def test_comparability_constant_potential(spec):
    rep = auxfun.verify_m_comparability(profile(spec, "constant", value=1.0), 500, seed=0)
    assert rep.k0 == 0.0 and rep.C == pytest.approx(1.0, abs=1e-9) and rep.bounded and rep.a_holds


def test_comparability_quadratic_and_swap(spec):
    prof = profile(spec, "radial-power", alpha=2)
    rng = np.random.default_rng(4)
    pts = spec.points[spec.omega_mask]
    pairs = [(pts[i], pts[j]) for i, j in rng.integers(0, len(pts), (500, 2)) if i != j]
    rep = auxfun.verify_m_comparability(prof, pairs)
    swapped = auxfun.verify_m_comparability(prof, [(b, a) for a, b in pairs])
    assert rep.bounded and 0.0 <= rep.k0 < 10
    assert rep.a_holds == swapped.a_holds


def test_fefferman_phong_constant_potential(spec):
    prof = profile(spec, "constant", value=1.0)
    res = auxfun.fefferman_phong_check(prof, 50, seed=1)
    assert res.empirical_C <= 4 * math.pi / 3 * 1.03
    bumps = auxfun.random_bumps(spec, 5, seed=2)
    one = auxfun.fefferman_phong_check(prof, bumps)
    two = auxfun.fefferman_phong_check(prof, [b.scaled(2.0) for b in bumps])
    np.testing.assert_allclose(one.ratios, two.ratios, rtol=1e-12)


def test_fefferman_phong_quadratic_finite(spec):
    res = auxfun.fefferman_phong_check(profile(spec, "radial-power", alpha=2), 50, seed=1)
    assert np.isfinite(res.empirical_C) and res.empirical_C > 0


def test_agmon_constant_metric_is_euclidean():
    spec = make_grid((17, 17, 17), 1 / 8)
    graph = auxfun.AgmonGraph.build(profile(spec, "constant", value=1.0))
    for a, b in (((0, 0, 0), (0.75, 0, 0)), ((-0.5, -0.5, 0), (0.5, 0.25, 0.5)), ((0, 0, 0), (0.5, 0.5, 0.5))):
        d = auxfun.agmon_distance(graph, a, b)
        assert d == pytest.approx(M_UNIT * np.linalg.norm(np.subtract(a, b)), rel=0.10)
    assert auxfun.agmon_distance(graph, (0.25, 0, 0), (0.25, 0, 0)) == 0.0


def test_agmon_triangle_inequality():
    spec = make_grid((13, 13, 13), 1 / 6)
    graph = auxfun.AgmonGraph.build(profile(spec, "radial-power", alpha=2))
    rng = np.random.default_rng(5)
    pts = spec.points[spec.omega_mask]
    for _ in range(100):
        x, y, z = pts[rng.integers(0, len(pts), 3)]
        assert auxfun.agmon_distance(graph, x, z) <= (auxfun.agmon_distance(graph, x, y)
                                                      + auxfun.agmon_distance(graph, y, z)) * (1 + 1e-12)


def test_csv_writers(tmp_path, spec):
    prof = profile(spec, "constant", value=1.0)
    path = auxfun.write_m_csv(tmp_path / "m.csv", prof, [(0, 0, 0), (0.1, 0, 0)])
    rows = path.read_text().splitlines()
    assert rows[0] == "x1,x2,x3,m" and len(rows) == 3
    assert float(rows[1].split(",")[3]) == pytest.approx(M_UNIT, abs=1e-6)
    path = auxfun.write_agmon_csv(tmp_path / "a.csv", [((0, 0, 0), (1, 0, 0), 2.0)])
    assert path.read_text().splitlines()[0] == "x1,x2,x3,y1,y2,y3,d"
