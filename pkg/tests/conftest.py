import numpy as np
import pytest

from pcqa.pointcloud import PointCloud

ACCEPTANCE_LINES = []


def brute_knn(points, q, k):
    """Exhaustive k-NN: sort by (squared distance, index)."""
    points = np.asarray(points, dtype=np.float64)
    d2 = ((points - np.asarray(q, dtype=np.float64)) ** 2).sum(axis=1)
    order = np.lexsort((np.arange(len(points)), d2))[:k]
    return [(int(i), float(d2[i])) for i in order]


def brute_distance_field(occ):
    """Distance from every voxel to the nearest occupied voxel, by full enumeration."""
    size = occ.shape[0]
    occupied = np.argwhere(occ > 0.5).astype(np.float64)
    grid = np.stack(np.meshgrid(*[np.arange(size)] * 3, indexing="ij"), -1).reshape(-1, 3)
    out = np.empty(len(grid))
    for s in range(0, len(grid), 512):
        diff = grid[s:s + 512, None, :] - occupied[None, :, :]
        out[s:s + 512] = np.sqrt((diff ** 2).sum(-1)).min(axis=1)
    return out.reshape(occ.shape)


def brute_directed_d1(A, B):
    d2 = ((A[:, None, :] - B[None, :, :]) ** 2).sum(-1)
    return d2.min(axis=1).mean()


def brute_directed_d2(A, nA, B):
    d2 = ((A[:, None, :] - B[None, :, :]) ** 2).sum(-1)
    nn = d2.argmin(axis=1)
    total = 0.0
    for i in range(len(A)):
        total += float(np.dot(A[i] - B[nn[i]], nA[i])) ** 2
    return total / len(A)


def random_unit(rng, n):
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_cloud():
    return PointCloud([[0, 0, 0], [1, 0, 0], [0, 2, 1], [3, 3, 3]])


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
