import sys
from pathlib import Path

import numpy as np
import pytest

from camrefine.imagecore import RasterImage

sys.path.insert(0, str(Path(__file__).parent))

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def solid(h, w, color):
    return RasterImage(np.broadcast_to(np.asarray(color, dtype=np.uint8), (h, w, 3)).copy())


def vertical_halves(n, left=(0, 0, 0), right=(255, 255, 255)):
    data = np.empty((n, n, 3), dtype=np.uint8)
    data[:, : n // 2] = left
    data[:, n // 2:] = right
    return RasterImage(data)


def disk_image(n=64, radius=None, fg=(220, 40, 40), bg=(30, 60, 160)):
    radius = radius or n * 0.3
    yy, xx = np.mgrid[0:n, 0:n]
    inside = (yy - (n - 1) / 2) ** 2 + (xx - (n - 1) / 2) ** 2 <= radius ** 2
    data = np.empty((n, n, 3), dtype=np.uint8)
    data[:] = bg
    data[inside] = fg
    return RasterImage(data), inside


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
