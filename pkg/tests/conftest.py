import sys

import numpy as np
import pytest
import torch

from saber.scene_data import MapSpec, Scene, default_map


@pytest.fixture
def hwy():
    return default_map()


def straight_scene(map, starts, velocities, T=20, scene_id="s", labels=None):
    """Vehicles moving at constant velocity from ``starts``."""
    t = np.arange(T)[None, :, None]
    pos = np.asarray(starts, float)[:, None, :] + t * np.asarray(velocities, float)[:, None, :]
    return Scene(scene_id, 0.1, pos, labels or ("normal",) * T, map)


@pytest.fixture
def make_straight(hwy):
    def _make(starts, velocities, T=20, **kw):
        return straight_scene(hwy, starts, velocities, T, **kw)
    return _make


@pytest.fixture
def float64():
    old = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(old)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        terminalreporter.write_line(results[n])
