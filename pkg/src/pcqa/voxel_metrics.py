"""Voxel-grid quality metrics and block aggregation."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate

from .errors import InvalidArgument, ShapeMismatch
from .voxelize import TdfConfig, VoxelGrid, paired_blocks, voxelize

CLIP_LO = 0.001
CLIP_HI = 0.999
# Cross entropies on binary grids only clip the lower bound: a correctly
# predicted voxel contributes log(1) = 0, as it does under the focal loss.
BCE_CLIP_HI = 1.0
NABCE_FLOOR = 0.001


@dataclass(frozen=True)
class VoxelMetricConfig:
    alpha: float = 0.75
    gamma: float = 2.0
    clip_lo: float = CLIP_LO
    clip_hi: float = CLIP_HI
    nabce_window: int = 5
    aggregation: str = "L1"

    def __post_init__(self):
        if not 0 < self.alpha < 1:
            raise InvalidArgument("alpha must lie in (0, 1)")
        if self.gamma < 0:
            raise InvalidArgument("gamma must be non-negative")
        if not self.clip_lo < self.clip_hi:
            raise InvalidArgument("clip_lo must be below clip_hi")
        if self.nabce_window < 1 or self.nabce_window % 2 == 0:
            raise InvalidArgument("nabce_window must be a positive odd integer")
        if self.aggregation not in ("L1", "L2"):
            raise InvalidArgument("aggregation must be L1 or L2")


# Block aggregation per metric name, following the published metric table.
DEFAULT_AGGREGATION = {
    "bin-bce": "L1",
    "bin-nabce": "L1",
    "bin-wbce": "L2",
    "bin-pl": "L1",
    "tdf-mse": "L1",
    "tdf-pl": "L1",
}


def _values(grid):
    return grid.values if isinstance(grid, VoxelGrid) else np.asarray(grid, dtype=np.float64)


def _pair(A, B):
    a, b = _values(A), _values(B)
    if a.shape != b.shape:
        raise ShapeMismatch(f"grid shapes differ: {a.shape} vs {b.shape}")
    return a, b


def _clipped_logs(b, lo, hi):
    return np.log(np.clip(b, lo, hi)), np.log(np.clip(1.0 - b, lo, hi))


def wbce(A, B, alpha=0.75, clip_lo=CLIP_LO, clip_hi=BCE_CLIP_HI) -> float:
    """Weighted binary cross entropy, mean over voxels. alpha=0.5 gives BCE."""
    a, b = _pair(A, B)
    log_b, log_nb = _clipped_logs(b, clip_lo, clip_hi)
    terms = alpha * a * log_b + (1 - alpha) * (1 - a) * log_nb
    return float(-terms.sum() / a.size)


def bce(A, B, clip_lo=CLIP_LO, clip_hi=BCE_CLIP_HI) -> float:
    return wbce(A, B, 0.5, clip_lo, clip_hi)


def focal_terms(a, b, alpha, gamma, clip_lo=CLIP_LO, clip_hi=CLIP_HI):
    """Per-voxel focal loss contributions (positive)."""
    log_b, log_nb = _clipped_logs(b, clip_lo, clip_hi)
    return -(alpha * a * (1 - b) ** gamma * log_b
             + (1 - alpha) * (1 - a) * b ** gamma * log_nb)


def focal_loss(A, B, cfg: VoxelMetricConfig = VoxelMetricConfig()) -> float:
    """Focal loss summed (not averaged) over voxels.

    B may hold occupancy probabilities; with binary B the modulating
    factors are 0 or 1 and gamma has no effect.
    """
    a, b = _pair(A, B)
    if b.min() < 0 or b.max() > 1:
        raise InvalidArgument("B must hold values in [0, 1]")
    return float(focal_terms(a, b, cfg.alpha, cfg.gamma, cfg.clip_lo, cfg.clip_hi).sum())


def _inverse_distance_kernel(m):
    h = m // 2
    r = np.arange(-h, h + 1, dtype=np.float64)
    dist = np.sqrt(r[:, None, None] ** 2 + r[None, :, None] ** 2 + r[None, None, :] ** 2)
    with np.errstate(divide="ignore"):
        kernel = 1.0 / dist
    kernel[h, h, h] = 0.0
    return kernel


def neighborhood_resemblance(occ, window=5):
    """Sum of inverse distances to same-occupancy voxels in an m^3 window.

    Windows are truncated at the grid border.
    """
    occ = (np.asarray(occ) > 0.5).astype(np.float64)
    kernel = _inverse_distance_kernel(window)
    same_occ = correlate(occ, kernel, mode="constant", cval=0.0)
    same_empty = correlate(1.0 - occ, kernel, mode="constant", cval=0.0)
    return np.where(occ > 0, same_occ, same_empty)


def nabce_weights(occ, window=5):
    r = neighborhood_resemblance(occ, window)
    rmax = r.max()
    if rmax <= 0:
        return np.ones_like(r)
    return np.maximum(1.0 - r / rmax, NABCE_FLOOR)


def nabce(A, B, cfg: VoxelMetricConfig = VoxelMetricConfig()) -> float:
    """Neighbourhood-adaptive BCE with per-voxel weights derived from grid A."""
    a, b = _pair(A, B)
    alpha_u = nabce_weights(a, cfg.nabce_window)
    log_b, log_nb = _clipped_logs(b, cfg.clip_lo, BCE_CLIP_HI)
    terms = alpha_u * a * log_b + (1 - alpha_u) * (1 - a) * log_nb
    return float(-terms.sum() / a.size)


def tdf_mse(A, B) -> float:
    if isinstance(A, VoxelGrid) and isinstance(B, VoxelGrid):
        if A.repr != B.repr or A.repr not in ("tdf", "tsdf"):
            raise InvalidArgument(f"tdf_mse needs two TDF grids, got {A.repr}/{B.repr}")
    a, b = _pair(A, B)
    return float(np.mean((a - b) ** 2))


def aggregate_blocks(values, norm="L1") -> float:
    """Combine per-block metric values: L1 is the mean, L2 the root mean square."""
    v = np.asarray(list(values), dtype=np.float64)
    if v.size == 0:
        raise InvalidArgument("no block values to aggregate")
    if norm == "L1":
        return float(np.mean(v))
    if norm == "L2":
        scale = np.max(np.abs(v))
        if scale == 0:
            return 0.0
        # scaled to avoid under/overflow when squaring
        return float(scale * np.sqrt(np.mean((v / scale) ** 2)))
    raise InvalidArgument(f"unknown aggregation {norm!r}")


VOXEL_METRICS = ("bin-bce", "bin-wbce", "bin-nabce", "tdf-mse")


def block_metric(name, grid_a, grid_b, cfg: VoxelMetricConfig):
    if name == "bin-bce":
        return bce(grid_a, grid_b, cfg.clip_lo)
    if name == "bin-wbce":
        return wbce(grid_a, grid_b, cfg.alpha, cfg.clip_lo)
    if name == "bin-nabce":
        return nabce(grid_a, grid_b, cfg)
    if name == "tdf-mse":
        return tdf_mse(grid_a, grid_b)
    raise InvalidArgument(f"unknown voxel metric {name!r}")


def cloud_voxel_metric(name, A, B, block_size=64, tdf=None, cfg=None, aggregation=None,
                       threads=1):
    """Voxel metric between two clouds, computed per block and aggregated.

    Blocks are the union of occupied blocks of both clouds. Per-block values
    are collected in origin order, so the result does not depend on threads.
    """
    if name not in VOXEL_METRICS:
        raise InvalidArgument(f"unknown voxel metric {name!r}")
    tdf = tdf or TdfConfig()
    cfg = cfg or VoxelMetricConfig()
    aggregation = aggregation or DEFAULT_AGGREGATION[name]
    repr_ = "tdf" if name == "tdf-mse" else "binary"

    def one(pair):
        _, a, b = pair
        return block_metric(name, voxelize(a, block_size, repr_, tdf),
                            voxelize(b, block_size, repr_, tdf), cfg)

    pairs = list(paired_blocks(A, B, block_size))
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            values = list(pool.map(one, pairs))
    else:
        values = [one(p) for p in pairs]
    return aggregate_blocks(values, aggregation)
