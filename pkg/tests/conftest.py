import numpy as np
import pytest

from gpmpc.constraints import ObstacleState, RoadBounds
from gpmpc.dynamics import NominalModel, ProcessNoise, TireParamsLinear, TireParamsMagic, VehicleParams

from criteria import CRITERIA


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        passed, detail = CRITERIA[n]
        terminalreporter.write_line(f"CRITERION {n}: {'PASS' if passed else 'FAIL'} - {detail}")


@pytest.fixture
def params():
    return VehicleParams()


@pytest.fixture
def magic():
    return TireParamsMagic()


@pytest.fixture
def linear():
    return TireParamsLinear()


@pytest.fixture
def nominal():
    return NominalModel()


@pytest.fixture
def bounds():
    return RoadBounds(3.75, 3.75, 0.8)


@pytest.fixture
def lead1():
    return ObstacleState(25.0, -1.875, 12.0, 4.0, 1.6, 0)


@pytest.fixture
def x_init():
    return np.array([0.0, -1.875, 0.0, 20.0, 0.0, 0.0])


@pytest.fixture
def no_noise():
    return ProcessNoise.zero()
