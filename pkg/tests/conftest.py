import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from atlasfuse.volume import Geometry, LabelMask, Volume  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def vol(arr, spacing=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0)):
    return Volume(np.asarray(arr, dtype=np.float32), spacing, origin)


def mask(arr, spacing=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0)):
    return LabelMask(np.asarray(arr, dtype=np.int32), spacing, origin)


def geom(dims, spacing=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0)):
    return Geometry(dims, spacing, origin)


ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)
