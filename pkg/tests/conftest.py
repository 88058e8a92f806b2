import numpy as np
import pytest

from starmask.backends import PlantedRegionBackend
from starmask.fixtures import block_texture
from starmask.geometry import ContourParams

PLANTED_DISC = (0.3, -0.2, 0.25)


def random_contour(rng: np.random.Generator, K: int = 5, coeff_scale: float = 0.4) -> ContourParams:
    center = rng.uniform(-0.5, 0.5, size=2)
    r0 = rng.uniform(0.2, 0.8)
    coeffs = rng.normal(scale=coeff_scale, size=(K, 2)) / np.arange(1, K + 1)[:, None]
    return ContourParams(tuple(center), r0, coeffs)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def planted_image():
    return block_texture(64, 64, 3, 2, seed=0)


@pytest.fixture(scope="session")
def planted_backend():
    return PlantedRegionBackend([PLANTED_DISC], pool=2)


def pytest_terminal_summary(terminalreporter):
    import sys

    module = sys.modules.get("test_acceptance")
    results = getattr(module, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        terminalreporter.write_line(results[number])
