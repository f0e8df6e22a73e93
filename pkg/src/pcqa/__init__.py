"""Point cloud geometry quality assessment: voxel grids, objective metrics,
an autoencoder-based perceptual distance and a subjective-score evaluation
protocol."""

from .errors import *  # noqa: F401,F403
from .pointcloud import PointCloud, build_index, nearest_neighbors, read_ply, write_ply
from .voxelize import (TdfConfig, VoxelGrid, distance_transform, partition_blocks,
                       voxelize_binary, voxelize_tdf, voxelize_tsdf)
from .voxel_metrics import (VoxelMetricConfig, aggregate_blocks, bce, focal_loss, nabce,
                            tdf_mse, wbce)
from .pointset import PsnrConfig, d1_mse, d2_mse, estimate_normals, geometry_psnr
from .perceptual import FeatureSelector, latent_mse, perceptual_distance

__version__ = "0.1.0"
