import math

import numpy as np
import pytest

from msfilter.sde_core import GaussianInit, ModelFlags, MultiscaleModel


def scalar_model(b=None, b_I=None, sigma=0.5, f=None, g=math.sqrt(2.0), h=None, alpha=0.5,
                 gamma=1.0, x0=0.0, var_x0=0.5, z0=0.0, var_z0=1.0, flags=None, name="test"):
    """1-D slow / 1-D fast model built from elementwise callables of (x, z)."""
    zero = lambda x, z: np.zeros_like(x)
    b = b or (lambda x, z: -x)
    b_I = b_I or zero
    f = f or (lambda x, z: -z)
    h = h or zero
    init = GaussianInit(np.array([x0]), np.array([[var_x0]]), np.array([z0]), np.array([[var_z0]]))
    return MultiscaleModel(
        m=1, n=1, w=1, v=1, u=1, d=1, b=b, b_I=b_I,
        sigma=lambda x, z: np.full((len(x), 1, 1), sigma),
        f=f, g=lambda x, z: np.full((len(z), 1, 1), g), h=h,
        alpha=np.array([[alpha]]), gamma=np.array([[gamma]]), init=init,
        flags=flags or ModelFlags(), name=name)


@pytest.fixture
def make_model():
    return scalar_model


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
