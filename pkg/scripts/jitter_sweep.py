"""Metric response to Gaussian jitter on a dense synthetic sphere.

    python scripts/jitter_sweep.py [--weights runs/tdf.pcqae]
"""

import argparse

from pcqa.autoencoder import init_params, load_params
from pcqa.perceptual import perceptual_distance
from pcqa.pointset import d1_mse, d2_mse, estimate_normals
from pcqa.synthetic import dense_sphere_cloud, jitter
from pcqa.voxel_metrics import cloud_voxel_metric

SIGMAS = (0.25, 0.5, 1.0, 2.0, 4.0)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--weights", help="TDF checkpoint (default: untrained, seed 0)")
    ap.add_argument("--seed", type=int, default=1)
    args = ap.parse_args()
    params = load_params(args.weights, "tdf") if args.weights else init_params(repr="tdf")
    ref = dense_sphere_cloud(bit_depth=6)
    ref_n = estimate_normals(ref)
    print("sigma,d1_mse,d2_mse,bin_wbce,bin_nabce,tdf_mse,tdf_pl")
    for s in SIGMAS:
        dist = jitter(ref, s, seed=args.seed)
        row = [d1_mse(ref, dist), d2_mse(ref_n, estimate_normals(dist)),
               cloud_voxel_metric("bin-wbce", ref, dist),
               cloud_voxel_metric("bin-nabce", ref, dist),
               cloud_voxel_metric("tdf-mse", ref, dist),
               perceptual_distance(ref, dist, params)]
        print(",".join([str(s)] + [f"{v:.6g}" for v in row]))


if __name__ == "__main__":
    main()
