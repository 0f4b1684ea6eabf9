import numpy as np
import pytest

from lpadapt.local_model import Basis, LadderDesign, ScaleLadder


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)


@pytest.fixture
def standard_scene():
    """Equidistant unit-interval design with a boxcar ladder, p = 1."""
    n = 200
    basis = Basis.polynomial(0, dim=1)
    points = np.linspace(0.0, 1.0, n)
    ladder = ScaleLadder.geometric(8 / (2.0 * n), 4, growth=1.5, kernel="boxcar")
    sigma = np.ones(n)
    return basis, ladder, points, sigma


@pytest.fixture
def standard_ladder_design(standard_scene):
    basis, ladder, points, sigma = standard_scene
    return LadderDesign(basis, ladder, points, 0.5, sigma)


def random_design(rng, n=40, p=2, kernel="boxcar", K=3):
    """Small random scene usable by several suites."""
    pts = np.sort(rng.uniform(0.0, 1.0, n))
    x = float(rng.uniform(0.4, 0.6))
    sigma = rng.uniform(0.5, 1.5, n)
    dist = np.sort(np.abs(pts - x))
    counts = [min(max(3 * p, 4) * 2**j, n - 1) for j in range(K)]
    bands = tuple(float(0.5 * (dist[c - 1] + dist[c])) for c in counts)
    ladder = ScaleLadder(bands, kernel=kernel)
    basis = Basis.polynomial(p - 1, dim=1)
    return basis, ladder, pts, x, sigma
