"""Seeded synthetic surfaces (planes, spheres, boxes) in voxel units."""

from __future__ import annotations

import numpy as np

from .pointcloud import PointCloud

SHAPES = ("plane", "sphere", "box")


def _unique_voxels(points, size):
    vox = np.floor(points).astype(np.int64)
    vox = vox[np.all((vox >= 0) & (vox < size), axis=1)]
    return np.unique(vox, axis=0).astype(np.float64)


def sphere_points(center, radius, n=None):
    """Fibonacci-lattice samples on a sphere surface (float coordinates)."""
    if n is None:
        n = max(64, int(4 * np.pi * radius ** 2 * 4))
    i = np.arange(n) + 0.5
    phi = np.arccos(1 - 2 * i / n)
    theta = np.pi * (1 + 5 ** 0.5) * i
    dirs = np.stack([np.cos(theta) * np.sin(phi), np.sin(theta) * np.sin(phi), np.cos(phi)], 1)
    return np.asarray(center, dtype=np.float64) + radius * dirs


def plane_points(size, rng):
    normal = rng.normal(size=3)
    normal /= np.linalg.norm(normal)
    center = rng.uniform(0.3 * size, 0.7 * size, size=3)
    # two in-plane axes
    a = np.cross(normal, [1.0, 0, 0] if abs(normal[0]) < 0.9 else [0, 1.0, 0])
    a /= np.linalg.norm(a)
    b = np.cross(normal, a)
    t = np.linspace(-size, size, 4 * size)
    s, r = np.meshgrid(t, t, indexing="ij")
    return center + s.reshape(-1, 1) * a + r.reshape(-1, 1) * b


def box_points(size, rng):
    lo = rng.uniform(0.1 * size, 0.35 * size, size=3)
    hi = rng.uniform(0.65 * size, 0.9 * size, size=3)
    t = np.linspace(0, 1, 4 * size)
    u, v = np.meshgrid(t, t, indexing="ij")
    u, v = u.ravel(), v.ravel()
    faces = []
    for axis in range(3):
        o1, o2 = [k for k in range(3) if k != axis]
        for side in (lo[axis], hi[axis]):
            p = np.empty((u.size, 3))
            p[:, axis] = side
            p[:, o1] = lo[o1] + u * (hi[o1] - lo[o1])
            p[:, o2] = lo[o2] + v * (hi[o2] - lo[o2])
            faces.append(p)
    return np.concatenate(faces)


def synthetic_block(size, shape, rng) -> PointCloud:
    """Voxelized surface of one shape inside a size^3 block (integer coordinates)."""
    if shape == "plane":
        pts = plane_points(size, rng)
    elif shape == "sphere":
        radius = rng.uniform(0.2 * size, 0.4 * size)
        pts = sphere_points(np.full(3, size / 2) + rng.uniform(-2, 2, 3), radius)
    elif shape == "box":
        pts = box_points(size, rng)
    else:
        raise ValueError(f"unknown shape {shape!r}")
    return PointCloud(_unique_voxels(pts, size))


def synthetic_blocks(count, size, seed=0):
    """``count`` clouds cycling through the shape families."""
    rng = np.random.default_rng(seed)
    return [synthetic_block(size, SHAPES[i % len(SHAPES)], rng) for i in range(count)]


def dense_sphere_cloud(radius=20.0, margin=12.0, bit_depth=None):
    """Voxelized sphere surface shifted so all coordinates stay non-negative.

    With ``bit_depth`` the cloud is tagged as living on a 2**bit_depth grid.
    """
    center = np.full(3, radius + margin)
    pts = sphere_points(center, radius, n=int(4 * np.pi * radius ** 2 * 6))
    return PointCloud(np.unique(np.floor(pts), axis=0), bit_depth=bit_depth)


def jitter(pc: PointCloud, sigma, seed=0, round_to_grid=True):
    """Add i.i.d. Gaussian noise to every coordinate.

    Coordinates are clamped at zero, and below 2**bit_depth - 1 when the
    cloud carries a bit depth, so distorted points stay on the source grid.
    """
    rng = np.random.default_rng(seed)
    pts = pc.points + rng.normal(scale=sigma, size=pc.points.shape)
    if round_to_grid:
        pts = np.round(pts)
    hi = None if pc.bit_depth is None else float(2 ** pc.bit_depth - 1)
    return PointCloud(np.clip(pts, 0.0, hi), bit_depth=pc.bit_depth)
