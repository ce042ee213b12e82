import math

import numpy as np
import pytest

from oneplap.grid import Grid, TimeSlab
from oneplap.scenarios import BinghamPipeSpec, run_bingham
from oneplap.solver import StepperConfig, steady_window

# criterion number -> summary line, filled by tests/test_acceptance.py
ACCEPTANCE = {}


@pytest.fixture(scope="session")
def bingham64():
    """Steady pipe flow at h = 1/64 and a broadcast window of 2000 slices."""
    res = run_bingham(BinghamPipeSpec(), 2e-3, 1 / 64, StepperConfig(dt=0.5))
    win = steady_window(res.problem, StepperConfig(dt=1e-4), res.final, res.result.slab.times[-1], 2000)
    return res, win


def constant_gradient_slab(a, b, n=32, steps=201, dt=2.5e-4):
    g = Grid.unit_square(n)
    X, Y = g.coords()
    u = a * X + b * Y
    return TimeSlab(g, dt * np.arange(steps), np.broadcast_to(u, (steps,) + g.shape))


def snap(x, h):
    return round(x / h) * h


def polar(r, angle, h):
    return (snap(r * math.cos(angle), h), snap(r * math.sin(angle), h))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[k])
