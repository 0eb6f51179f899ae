import numpy as np
import pytest

from liftseg.geometry import PointCloud
from liftseg.masks import MaskSet
from liftseg.synth import SynthSpec, synth_generate

# acceptance results collected here and printed at the end of the session
ACCEPTANCE_LINES: dict = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def blob_cloud(rng, centers, n_each=40, spread=0.05):
    """Gaussian blobs; returns (cloud, MaskSet with one mask per blob)."""
    pts, labels = [], []
    for i, c in enumerate(centers):
        pts.append(rng.normal(c, spread, (n_each, 3)))
        labels += [i] * n_each
    pos = np.concatenate(pts)
    colors = np.repeat(rng.uniform(0, 1, (len(centers), 3)), n_each, axis=0)
    return PointCloud(pos, colors), MaskSet.from_labels(np.array(labels))


@pytest.fixture(scope="session")
def small_scene():
    spec = SynthSpec(seed=7, object_count=(2, 2), room_extent=(3.0, 3.0, 1.6), object_size=(0.3, 0.5),
                     points_per_object=(400, 600), frames_per_scene=3)
    return synth_generate(spec)
