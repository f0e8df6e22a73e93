import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pcqa.errors import InvalidArgument, ShapeMismatch
from pcqa.pointcloud import PointCloud
from pcqa.voxel_metrics import (DEFAULT_AGGREGATION, VoxelMetricConfig, aggregate_blocks, bce,
                                cloud_voxel_metric, focal_loss, nabce, nabce_weights,
                                neighborhood_resemblance, tdf_mse, wbce)
from pcqa.voxelize import VoxelGrid


def naive_nabce(a, b, m=5, lo=0.001):
    """Per-voxel loops over the window, no vectorization."""
    n = a.shape[0]
    h = m // 2
    r = np.zeros_like(a)
    for u in np.ndindex(a.shape):
        total = 0.0
        for off in np.ndindex((m, m, m)):
            v = tuple(u[i] + off[i] - h for i in range(3))
            if v == u or min(v) < 0 or max(v) >= n:
                continue
            if a[v] == a[u]:
                total += 1.0 / math.dist(u, v)
        r[u] = total
    rmax = r.max()
    alpha = np.maximum(1 - r / rmax, 0.001) if rmax > 0 else np.ones_like(r)
    s = 0.0
    for u in np.ndindex(a.shape):
        pb = min(max(b[u], lo), 1.0)
        pn = min(max(1 - b[u], lo), 1.0)
        s += alpha[u] * a[u] * math.log(pb) + (1 - alpha[u]) * (1 - a[u]) * math.log(pn)
    return -s / a.size


def test_wbce_matching_grids_is_zero(rng):
    a = (rng.random((8, 8, 8)) < 0.3).astype(float)
    for alpha in (0.25, 0.5, 0.75):
        assert wbce(a, a, alpha) == 0.0


def test_wbce_all_wrong():
    a, b = np.ones((4, 4, 4)), np.zeros((4, 4, 4))
    assert wbce(a, b, 0.75) == pytest.approx(-0.75 * math.log(0.001), rel=1e-14)
    assert -0.75 * math.log(0.001) == pytest.approx(5.181, abs=1e-3)


def test_bce_is_half_alpha(rng):
    a = (rng.random((6, 6, 6)) < 0.5).astype(float)
    b = (rng.random((6, 6, 6)) < 0.5).astype(float)
    assert bce(a, b) == wbce(a, b, 0.5)


def test_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        wbce(np.zeros((4, 4, 4)), np.zeros((8, 8, 8)))
    with pytest.raises(ShapeMismatch):
        focal_loss(np.zeros((4, 4, 4)), np.zeros((8, 8, 8)))


def test_focal_gamma_invariance_binary(rng):
    a = (rng.random((8, 8, 8)) < 0.3).astype(float)
    b = (rng.random((8, 8, 8)) < 0.3).astype(float)
    vals = [focal_loss(a, b, VoxelMetricConfig(gamma=g)) for g in (0.5, 1, 2, 4)]
    assert len(set(vals)) == 1
    assert vals[0] == pytest.approx(a.size * wbce(a, b, 0.75), rel=1e-12)


def test_focal_matching_binary_is_zero(rng):
    a = (rng.random((8, 8, 8)) < 0.3).astype(float)
    assert focal_loss(a, a) == 0.0


def test_focal_probabilistic_closed_form():
    a, b = np.ones((4, 4, 4)), np.full((4, 4, 4), 0.5)
    got = focal_loss(a, b, VoxelMetricConfig(alpha=0.5, gamma=2))
    assert got == pytest.approx(64 * 0.5 * 0.25 * -math.log(0.5), rel=1e-14)


def test_focal_rejects_out_of_range():
    with pytest.raises(InvalidArgument):
        focal_loss(np.ones((2, 2, 2)), np.full((2, 2, 2), 1.5))


def test_nabce_all_ones_interior_floor():
    a = np.ones((7, 7, 7))
    w = nabce_weights(a, 5)
    # interior voxels see the full 5^3 window
    r_full = sum(1 / math.sqrt(i * i + j * j + k * k)
                 for i in range(-2, 3) for j in range(-2, 3) for k in range(-2, 3) if (i, j, k) != (0, 0, 0))
    r = neighborhood_resemblance(a, 5)
    assert r.max() == pytest.approx(r_full, rel=1e-14)
    np.testing.assert_allclose(r[2:5, 2:5, 2:5], r_full, rtol=1e-14)
    np.testing.assert_array_equal(w[2:5, 2:5, 2:5], 0.001)
    assert w[0, 0, 0] > 0.001


def test_nabce_weight_bounds(rng):
    for _ in range(5):
        w = nabce_weights((rng.random((8, 8, 8)) < rng.random()).astype(float))
        assert w.min() >= 0.001 and w.max() <= 1


def test_nabce_bruteforce(rng):
    for _ in range(4):
        a = (rng.random((8, 8, 8)) < 0.3).astype(float)
        b = (rng.random((8, 8, 8)) < 0.3).astype(float)
        assert nabce(a, b) == pytest.approx(naive_nabce(a, b), rel=1e-12)


def test_tdf_mse_cases(rng):
    a, b = rng.random((8, 8, 8)), rng.random((8, 8, 8))
    assert tdf_mse(a, a) == 0
    assert tdf_mse(np.zeros((4, 4, 4)), np.ones((4, 4, 4))) == 1.0
    naive = sum((x - y) ** 2 for x, y in zip(a.ravel(), b.ravel())) / a.size
    assert tdf_mse(a, b) == pytest.approx(naive, rel=1e-12)
    assert tdf_mse(a, b) == tdf_mse(b, a)


def test_tdf_mse_repr_mismatch():
    g = VoxelGrid(2, "binary", np.zeros((2, 2, 2)))
    h = VoxelGrid(2, "tdf", np.zeros((2, 2, 2)))
    with pytest.raises(InvalidArgument):
        tdf_mse(g, h)


def test_aggregate_examples():
    assert aggregate_blocks([3.0] * 5, "L1") == 3.0
    assert aggregate_blocks([3.0] * 5, "L2") == pytest.approx(3.0, rel=1e-15)
    assert aggregate_blocks([0, 2], "L1") == 1.0
    assert aggregate_blocks([0, 2], "L2") == pytest.approx(math.sqrt(2))
    with pytest.raises(InvalidArgument):
        aggregate_blocks([], "L1")


@settings(max_examples=50)
@given(st.lists(st.floats(0, 1e6), min_size=1, max_size=30))
def test_power_mean_inequality(values):
    assert aggregate_blocks(values, "L2") >= aggregate_blocks(values, "L1") * (1 - 1e-12)


def test_default_aggregation_table():
    assert DEFAULT_AGGREGATION == {"bin-bce": "L1", "bin-nabce": "L1", "bin-wbce": "L2",
                                   "bin-pl": "L1", "tdf-mse": "L1", "tdf-pl": "L1"}


def test_config_validation():
    for kwargs in ({"alpha": 0}, {"gamma": -1}, {"clip_lo": 0.5, "clip_hi": 0.5},
                   {"nabce_window": 4}, {"aggregation": "L3"}):
        with pytest.raises(InvalidArgument):
            VoxelMetricConfig(**kwargs)


def test_cloud_metric_identity_and_blocks(rng):
    pts = rng.integers(0, 40, (300, 3)).astype(float)
    A = PointCloud(pts)
    for name in ("bin-bce", "bin-wbce", "bin-nabce", "tdf-mse"):
        assert cloud_voxel_metric(name, A, A, block_size=16) == 0.0
    B = PointCloud(np.clip(pts + rng.integers(-1, 2, pts.shape), 0, None))
    single = cloud_voxel_metric("tdf-mse", A, B, block_size=16, threads=1)
    multi = cloud_voxel_metric("tdf-mse", A, B, block_size=16, threads=4)
    assert single == multi > 0
