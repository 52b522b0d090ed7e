import math
from dataclasses import replace

import numpy as np
import pytest

from greenlab.coefficients import (
    CoefficientError,
    PotentialPreset,
    SmoothRandomField,
    check_ellipticity,
    check_sign_conditions,
    preset_case,
)
from greenlab.grid import make_grid


@pytest.fixture(scope="module")
def spec():
    return make_grid((17, 17, 17), 1 / 8)


def test_identity_ellipticity(spec):
    c = preset_case(spec, "case1")
    ell = check_ellipticity(c)
    assert abs(ell.lambda_est - 1.0) <= 1e-12
    assert abs(ell.Lambda_est - math.sqrt(3.0)) <= 1e-12
    assert c.lambda_ == pytest.approx(1.0)


def test_diagonal_ellipticity(spec):
    c = preset_case(spec, "case1", {"A": {"kind": "diagonal", "diag": [2.0, 1.0, 1.0]}})
    ell = check_ellipticity(c)
    assert abs(ell.lambda_est - 1.0) <= 1e-12
    assert abs(ell.Lambda_est - math.sqrt(6.0)) <= 1e-12


def test_log_normal_lambda_is_shift(spec):
    c = preset_case(spec, "case1", {"A": {"kind": "log-normal", "shift": 0.3, "seed": 4}})
    ell = check_ellipticity(c)
    # v v^T has a 2-dimensional kernel, so the smallest eigenvalue is exactly the shift
    assert ell.lambda_est > 0
    assert ell.lambda_est == pytest.approx(0.3, rel=1e-2)
    assert ell.lambda_est >= 0.3 - 1e-12


def test_ellipticity_trial_floor(spec):
    with pytest.raises(CoefficientError):
        check_ellipticity(preset_case(spec, "case1"), trials=10)


def test_case_invariants(spec):
    with pytest.raises(CoefficientError):
        preset_case(spec, "case1", {"V": {"kind": "constant", "value": 1.0}})
    with pytest.raises(CoefficientError):
        preset_case(spec, "case3", {"V": {"kind": "zero"}})
    with pytest.raises(CoefficientError):
        preset_case(spec, "case3", {"V": {"kind": "constant", "value": 1.0},
                                    "b": {"kind": "constant", "vector": [1, 0, 0]}})
    with pytest.raises(CoefficientError):
        preset_case(spec, "case4")
    c3 = preset_case(spec, "case3", {"V": {"kind": "radial-power", "alpha": 2}})
    assert c3.V.min() >= 0 and not c3.has_drift


def test_case2_exponent_rule(spec):
    with pytest.raises(CoefficientError):
        preset_case(spec, "case2", {"V": {"kind": "constant", "value": 1}, "exponents": {"p": 1.0}})


def test_sign_minima_trivial(spec):
    c = preset_case(spec, "case2", {"V": {"kind": "radial-power", "alpha": 2}})
    s = check_sign_conditions(c)
    vmin = float(c.V[0, 0][spec.omega_mask].min())
    for key in ("V-div_b", "V-div_d", "V-half_div_bd"):
        assert s[key]["min"] == pytest.approx(vmin, abs=1e-14)


def test_sign_linear_drift(spec):
    c = preset_case(spec, "case2", {"V": {"kind": "constant", "value": 2.0},
                                    "b": {"kind": "linear", "matrix": np.diag([1.0, 0, 0]).tolist()},
                                    "coercivity": "none"})
    s = check_sign_conditions(c)
    assert s["V-div_b"]["min"] == pytest.approx(1.0, abs=1e-12)
    assert s["V-div_d"]["min"] == pytest.approx(2.0, abs=1e-12)


def test_sign_random_drift_against_symbolic_divergence():
    for n, h in ((17, 1 / 8), (33, 1 / 16)):
        spec = make_grid((n, n, n), h)
        amp, corr, seed = 0.1, 0.5, 3
        c = preset_case(spec, "case2", {"V": {"kind": "constant", "value": 1.0}, "coercivity": "none",
                                        "b": {"kind": "random-smooth", "seed": seed, "amplitude": amp,
                                              "corr_len": corr}})
        pts = spec.points
        div = np.zeros(spec.shape)
        for a in range(3):
            g = SmoothRandomField(seed + 7 * a, corr)
            phase = pts.reshape(-1, 3) @ g.freqs.T + g.phases
            div += (-amp * g.amp * np.sin(phase) @ g.freqs[:, a]).reshape(spec.shape)
        c = replace(c, V=div[None, None])
        # centered differences: |min(V - div_h b)| = O(h^2), measured constant about 3.7
        assert abs(check_sign_conditions(c)["V-div_b"]["min"]) <= 5.0 * h**2


def test_potential_presets():
    x = np.array([[2.0, 0.0, 0.0], [0.0, 1.0, 1.0]])
    np.testing.assert_allclose(PotentialPreset("radial-power", {"alpha": 2})(x), [4.0, 2.0])
    np.testing.assert_allclose(PotentialPreset("anisotropic-quadratic", {"coeffs": [1, 2, 3]})(x), [4.0, 5.0])
    chk = PotentialPreset("checkerboard", {"lo": 1, "hi": 10})(np.random.default_rng(0).uniform(-1, 1, (50, 3)))
    assert chk.min() >= 1 and chk.max() <= 10
    ln = PotentialPreset("log-normal-random", {"seed": 2})(x)
    assert np.all(ln > 0)
    with pytest.raises(CoefficientError):
        PotentialPreset("bogus")


def test_presets_reevaluate_on_other_grid(spec):
    c = preset_case(spec, "case3", {"V": {"kind": "log-normal-random", "seed": 5}})
    fine = c.on(make_grid((33, 33, 33), 1 / 16))
    np.testing.assert_allclose(fine.V[0, 0, ::2, ::2, ::2], c.V[0, 0])
