"""Block partitioning and binary / TDF / TSDF voxel grids."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import distance_transform_edt

from .errors import EmptyBlock, InvalidArgument, ParseError
from .pointcloud import PointCloud, SpatialIndex

REPRS = ("binary", "tdf", "tsdf")


@dataclass(frozen=True)
class TdfConfig:
    """Truncation distance for TDF/TSDF grids, in voxel units."""

    u: float = 5.0

    def __post_init__(self):
        if not self.u >= 1:
            raise InvalidArgument(f"TDF upper bound must be >= 1, got {self.u}")


@dataclass
class VoxelGrid:
    size: int
    repr: str
    values: np.ndarray

    def __post_init__(self):
        if self.repr not in REPRS:
            raise InvalidArgument(f"unknown representation {self.repr!r}")
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (self.size,) * 3:
            raise InvalidArgument(
                f"values shape {self.values.shape} does not match size {self.size}")

    @property
    def occupied(self):
        if self.repr == "binary":
            return self.values > 0.5
        return self.values == 0


@dataclass
class BlockGrid:
    block_size: int
    blocks: dict = field(default_factory=dict)  # origin tuple -> local PointCloud

    def origins(self):
        return sorted(self.blocks)


def partition_blocks(pc: PointCloud, block_size: int) -> BlockGrid:
    """Split a cloud into cubic blocks keyed by their integer origin."""
    if block_size < 2:
        raise InvalidArgument("block_size must be >= 2")
    pts = pc.points
    if np.any(pts < 0):
        raise InvalidArgument("partition_blocks requires non-negative coordinates")
    origins = (np.floor(pts / block_size) * block_size).astype(np.int64)
    local = pts - origins
    # local coordinates may round up to block_size for values just below a boundary
    local = np.where(local >= block_size, np.nextafter(block_size, 0), local)
    keys, inverse = np.unique(origins, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    grid = BlockGrid(block_size)
    order = np.argsort(inverse, kind="stable")
    bounds = np.searchsorted(inverse[order], np.arange(len(keys) + 1))
    for b, key in enumerate(keys):
        sel = order[bounds[b]:bounds[b + 1]]
        normals = pc.normals[sel] if pc.has_normals else None
        grid.blocks[tuple(int(v) for v in key)] = PointCloud(local[sel], normals, pc.bit_depth)
    return grid


def _voxel_indices(block: PointCloud, size: int):
    vox = np.floor(block.points).astype(np.int64)
    if vox.size and (vox.min() < 0 or vox.max() >= size):
        raise InvalidArgument(f"point outside [0, {size}) in block")
    return vox


def voxelize_binary(block: PointCloud, size: int) -> VoxelGrid:
    values = np.zeros((size,) * 3)
    vox = _voxel_indices(block, size)
    if len(vox):
        values[vox[:, 0], vox[:, 1], vox[:, 2]] = 1.0
    return VoxelGrid(size, "binary", values)


def _voxel_centers(size):
    r = np.arange(size, dtype=np.float64)
    return np.stack(np.meshgrid(r, r, r, indexing="ij"), axis=-1).reshape(-1, 3)


def distance_transform(occ: VoxelGrid) -> np.ndarray:
    """Exact Euclidean distance from every voxel to the nearest occupied voxel.

    Only the distance is needed here, not which voxel is nearest, so the
    exact separable transform is used instead of a tie-resolving k-NN.
    """
    mask = occ.values > 0.5
    if not mask.any():
        raise EmptyBlock("distance transform of an empty grid")
    return distance_transform_edt(~mask)


def voxelize_tdf(block: PointCloud, size: int, cfg: TdfConfig = TdfConfig()) -> VoxelGrid:
    binary = voxelize_binary(block, size)
    d = distance_transform(binary)
    return VoxelGrid(size, "tdf", np.minimum(d, cfg.u) / cfg.u)


def voxelize_tsdf(block: PointCloud, size: int, cfg: TdfConfig = TdfConfig()) -> VoxelGrid:
    """TDF magnitude with a sign from the normal of the nearest point.

    The nearest point is searched among voxel-quantized point positions
    (lowest point index on ties); a zero dot product counts as positive.
    """
    if not block.has_normals:
        raise InvalidArgument("TSDF requires per-point normals")
    magnitude = voxelize_tdf(block, size, cfg).values
    quantized = np.floor(block.points)
    index = SpatialIndex(quantized)
    centers = _voxel_centers(size)
    nn, _ = index.query(centers, k=1)
    nn = nn[:, 0]
    side = np.einsum("ij,ij->i", centers - quantized[nn], block.normals[nn])
    sign = np.where(side < 0, -1.0, 1.0).reshape((size,) * 3)
    values = np.where(magnitude == 0, 0.0, sign * magnitude)
    return VoxelGrid(size, "tsdf", values)


def empty_grid(size: int, repr: str) -> VoxelGrid:
    """Grid for a block holding no points (binary zeros, distance fields all-far)."""
    fill = 0.0 if repr == "binary" else 1.0
    return VoxelGrid(size, repr, np.full((size,) * 3, fill))


def voxelize(block: PointCloud | None, size: int, repr: str,
             cfg: TdfConfig = TdfConfig()) -> VoxelGrid:
    if block is None or len(block) == 0:
        return empty_grid(size, repr)
    if repr == "binary":
        return voxelize_binary(block, size)
    if repr == "tdf":
        return voxelize_tdf(block, size, cfg)
    if repr == "tsdf":
        return voxelize_tsdf(block, size, cfg)
    raise InvalidArgument(f"unknown representation {repr!r}")


# ---------------------------------------------------------------------------
# text dump


def write_grid(grid: VoxelGrid, path):
    """Write the debugging dump: header line then values with x varying fastest."""
    flat = grid.values.ravel(order="F")
    with open(path, "w", encoding="ascii") as f:
        f.write(f"PCQGRID {grid.size} {grid.repr}\n")
        for row in flat.reshape(-1, grid.size):
            f.write(" ".join(repr(float(v)) for v in row))
            f.write("\n")


def read_grid(path) -> VoxelGrid:
    with open(path, encoding="ascii") as f:
        header = f.readline().split()
        if len(header) != 3 or header[0] != "PCQGRID":
            raise ParseError("missing PCQGRID header", 1)
        size, repr_ = int(header[1]), header[2]
        values = np.array(f.read().split(), dtype=np.float64)
    if values.size != size ** 3:
        raise ParseError(f"expected {size ** 3} values, found {values.size}")
    return VoxelGrid(size, repr_, values.reshape((size,) * 3, order="F"))


def paired_blocks(A: PointCloud, B: PointCloud, block_size: int):
    """Block origins covering both clouds, with each cloud's local points.

    Yields (origin, block_a or None, block_b or None) over the sorted union
    of occupied origins; a missing side is voxelized as an empty block.
    """
    ga = partition_blocks(A, block_size)
    gb = partition_blocks(B, block_size)
    for origin in sorted(set(ga.blocks) | set(gb.blocks)):
        yield origin, ga.blocks.get(origin), gb.blocks.get(origin)


def shift_to_origin(*clouds):
    """Translate clouds by one common integer offset so all coordinates are >= 0."""
    lo = min(float(pc.points.min()) for pc in clouds)
    if lo >= 0:
        return clouds
    offset = np.floor(lo)
    return tuple(PointCloud(pc.points - offset, pc.normals, pc.bit_depth) for pc in clouds)
