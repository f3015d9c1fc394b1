import numpy as np
import pytest

from handsplat import features as F
from handsplat.gaussians import GaussianCloud
from handsplat.hand_model import build_canonical_rig
from handsplat.pipeline import AvatarTemplate


@pytest.fixture(scope="session")
def rig_mesh():
    return build_canonical_rig()


@pytest.fixture(scope="session")
def template():
    return AvatarTemplate(level=1)


@pytest.fixture
def small_shape():
    return F.NetworkShape(C=4, E=6, bands=2, map_size=8, hidden=5)


def make_cloud(rng, n, spread=0.04, validity=None):
    means = rng.normal(0.0, spread, (n, 3))
    q = rng.normal(size=(n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    phi = rng.uniform(0, 1, n) if validity is None else np.asarray(validity, dtype=float)
    return GaussianCloud(means, np.log(rng.uniform(0.004, 0.02, (n, 3))), q, rng.uniform(0.1, 0.9, n),
                         rng.uniform(0, 1, (n, 3)), phi, rng.uniform(0, 1, (n, 2)), rng.integers(0, 2, n),
                         np.arange(n))


@pytest.fixture
def cloud_factory():
    return make_cloud


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
