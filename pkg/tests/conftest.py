import numpy as np
import pytest

from wsseg.core import PointCloud


def random_cloud(seed, n=10, k=3, rgb=False, spread=1.0):
    rng = np.random.default_rng(seed)
    xyz = rng.normal(scale=spread, size=(n, 3))
    labels = np.arange(n) % k
    rng.shuffle(labels)
    col = rng.uniform(size=(n, 3)) if rgb else None
    return PointCloud(xyz, labels, k, rgb=col)


def central_diff(fn, x, h=1e-5):
    """Central finite differences of a scalar function of a flat vector."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        out[i] = (fn(x + e) - fn(x - e)) / (2 * h)
    return out


def max_rel_err(analytic, numeric, floor=1e-6):
    analytic, numeric = np.ravel(analytic), np.ravel(numeric)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))


@pytest.fixture
def cloud10():
    return random_cloud(0)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":").rstrip("abc"))):
            terminalreporter.write_line(line)
