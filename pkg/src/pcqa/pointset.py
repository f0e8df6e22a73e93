"""Point-to-point (D1) and point-to-plane (D2) geometry metrics."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .errors import EmptyInput, InvalidArgument
from .pointcloud import PointCloud, SpatialIndex

log = logging.getLogger(__name__)

NORMAL_NEIGHBORS = 9


@dataclass(frozen=True)
class PsnrConfig:
    resolution: float

    def __post_init__(self):
        if not self.resolution > 0:
            raise InvalidArgument("resolution must be positive")

    @property
    def peak(self):
        return 3.0 * self.resolution


def default_resolution(reference: PointCloud) -> float:
    """2**bit_depth - 1 when known, else the largest bounding-box edge."""
    if reference.bit_depth is not None:
        return float(2 ** reference.bit_depth - 1)
    extent = reference.points.max(axis=0) - reference.points.min(axis=0)
    return float(max(extent.max(), 1.0))


def _orient(normals, points, centroids):
    """Flip normals to point away from the local centroid.

    Where the point sits on the centroid (flat, symmetric patches) the
    dominant normal component is made positive instead.
    """
    offset = points - centroids
    s = np.einsum("ij,ij->i", offset, normals)
    flat = np.abs(s) <= 1e-9 * np.maximum(np.linalg.norm(offset, axis=1), 1.0)
    dominant = np.take_along_axis(normals, np.argmax(np.abs(normals), axis=1)[:, None], 1)[:, 0]
    flip = np.where(flat, dominant < 0, s < 0)
    return np.where(flip[:, None], -normals, normals)


def _quadric_normals(nbrs, points):
    """Unit normals from height-field quadrics z = ax2+bxy+cy2+dx+ey+f.

    nbrs has shape (n, k, 3). Each neighbourhood is expressed in its
    covariance frame centred on the query point; the normal is the surface
    gradient at the origin. Returns (normals, fallback_mask).
    """
    centroids = nbrs.mean(axis=1)
    centred = nbrs - centroids[:, None, :]
    cov = np.einsum("nki,nkj->nij", centred, centred) / nbrs.shape[1]
    _, vecs = np.linalg.eigh(cov)
    plane_normals = vecs[:, :, 0]
    frame = vecs[:, :, ::-1]  # columns: major, minor, normal axis
    local = np.einsum("nki,nij->nkj", nbrs - points[:, None, :], frame)
    x, y, z = local[..., 0], local[..., 1], local[..., 2]
    design = np.stack([x * x, x * y, y * y, x, y, np.ones_like(x)], axis=-1)
    scale = np.abs(design).max(axis=1, keepdims=True)
    scale[scale == 0] = 1.0
    u, sv, vt = np.linalg.svd(design / scale, full_matrices=False)
    tol = sv[:, :1] * max(design.shape[1:]) * np.finfo(np.float64).eps
    fallback = (sv <= tol).any(axis=1)
    safe = np.where(sv > tol, sv, 1.0)
    uz = np.einsum("nki,nk->ni", u, z) / safe
    uz[sv <= tol] = 0.0
    coef = np.einsum("nij,ni->nj", vt, uz) / scale[:, 0, :]
    n_local = np.stack([-coef[:, 3], -coef[:, 4], np.ones(len(coef))], axis=1)
    normals = np.einsum("nij,nj->ni", frame, n_local)
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    normals[fallback] = plane_normals[fallback]
    return _orient(normals, points, centroids), fallback


def estimate_normals(pc: PointCloud, k: int = NORMAL_NEIGHBORS, return_fallback=False):
    """Per-point normals from local quadric fits over the k nearest neighbours.

    The neighbourhood includes the point itself. Rank-deficient fits fall
    back to the covariance plane normal; ``return_fallback`` also returns
    the boolean mask of such points.
    """
    n = len(pc)
    if n < k:
        raise InvalidArgument(f"need at least {k} points for normal estimation, got {n}")
    index = SpatialIndex(pc.points)
    nbr_idx, _ = index.query(pc.points, k=k)
    normals = np.empty((n, 3))
    fallback = np.zeros(n, dtype=bool)
    chunk = 65536
    for s in range(0, n, chunk):
        sl = slice(s, min(n, s + chunk))
        normals[sl], fallback[sl] = _quadric_normals(pc.points[nbr_idx[sl]], pc.points[sl])
    if fallback.any():
        log.info("plane-fit fallback used for %d of %d normals", fallback.sum(), n)
    out = pc.with_normals(normals)
    return (out, fallback) if return_fallback else out


def _check(A, B):
    if len(A) == 0 or len(B) == 0:
        raise EmptyInput("point-set metrics need non-empty clouds")


def point_to_point_error(A: PointCloud, B: PointCloud) -> float:
    """Directed mean squared distance from each point of A to its nearest point in B."""
    _check(A, B)
    _, d2 = SpatialIndex(B.points).query(A.points, k=1)
    return float(d2[:, 0].mean())


def point_to_plane_error(A: PointCloud, B: PointCloud) -> float:
    """Directed mean squared projection of A-to-B errors on the normals of A."""
    _check(A, B)
    if not A.has_normals:
        raise InvalidArgument("point-to-plane error needs normals on the measured cloud")
    nn, _ = SpatialIndex(B.points).query(A.points, k=1)
    err = A.points - B.points[nn[:, 0]]
    proj = np.einsum("ij,ij->i", err, A.normals)
    return float(np.mean(proj ** 2))


def d1_mse(A: PointCloud, B: PointCloud) -> float:
    return max(point_to_point_error(A, B), point_to_point_error(B, A))


def d2_mse(A: PointCloud, B: PointCloud) -> float:
    if not (A.has_normals and B.has_normals):
        raise InvalidArgument("d2_mse needs normals on both clouds")
    return max(point_to_plane_error(A, B), point_to_plane_error(B, A))


def geometry_psnr(mse: float, cfg: PsnrConfig) -> float:
    """PSNR in dB with peak = 3 x resolution; returns inf for zero error."""
    if mse < 0:
        raise InvalidArgument("mse must be non-negative")
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(cfg.peak ** 2 / mse)
