import math

import pytest

from greenlab import green
from greenlab.coefficients import preset_case
from greenlab.forms import assemble
from greenlab.grid import make_grid

# exact |{1/(4π|x|) > τ}|·τ³
NEWTONIAN_WEAK_TYPE = (4 * math.pi / 3) / (4 * math.pi) ** 3


@pytest.fixture(scope="session")
def ref_spec():
    """Reference grid: 49³ nodes, h = 1/24, unit-radius inner region."""
    return make_grid((49, 49, 49), 1 / 24)


@pytest.fixture(scope="session")
def laplace_multiscale(ref_spec):
    return green.multiscale_whole_space(preset_case(ref_spec, "case1"), (0.0, 0.0, 0.0))


@pytest.fixture(scope="session")
def spec33():
    return make_grid((33, 33, 33), 1 / 16)


@pytest.fixture(scope="session")
def laplace33(spec33):
    c = preset_case(spec33, "case1")
    return c, assemble(spec33, c)


@pytest.fixture(scope="session")
def laplace_ws33(laplace33):
    return green.whole_space_green(laplace33[0], (0.0, 0.0, 0.0))


@pytest.fixture(scope="session")
def quadratic33(spec33):
    """Case3 with V = |x|², assembled in the W_V^{1,2} geometry."""
    c = preset_case(spec33, "case3", {"V": {"kind": "radial-power", "alpha": 2}})
    return c, assemble(spec33, c, "WV12")


@pytest.fixture(scope="session")
def laplace_ms33(laplace33):
    return green.multiscale_whole_space(laplace33[0], (0.0, 0.0, 0.0))
