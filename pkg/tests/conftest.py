import numpy as np
import pytest

from embryoreg.volume import Mask


def sphere(dims, center, radius, voxel_size=1.0):
    """Digital sphere ``{x : |x - c| <= r}`` on the voxel lattice."""
    idx = np.indices(dims).transpose(1, 2, 3, 0).astype(float)
    inside = ((idx - np.asarray(center, float)) ** 2).sum(-1) <= radius ** 2
    return Mask(inside, voxel_size)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# acceptance outcomes, one line each in the terminal summary
ACCEPTANCE = {}


def report(criterion, passed, detail):
    ACCEPTANCE[criterion] = (bool(passed), detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k}: {'PASS' if ok else 'FAIL'}  {detail}")
