"""Command-line entry point: voxelize | metric | train | eval | features."""

from __future__ import annotations

import argparse
import logging
import os
import sys

import numpy as np

from . import harness
from .autoencoder import TrainConfig, load_params, save_params, train
from .errors import EmptyInput, InvalidArgument, MissingData, PCQAError
from .perceptual import (FeatureSelector, detect_unused_features, perceptual_distance,
                         select_best_feature)
from .pointcloud import PointCloud, list_ply, read_ply
from .pointset import (PsnrConfig, d1_mse, d2_mse, default_resolution, estimate_normals,
                       geometry_psnr)
from .synthetic import synthetic_blocks
from .voxel_metrics import (DEFAULT_AGGREGATION, VOXEL_METRICS, VoxelMetricConfig,
                            cloud_voxel_metric)
from .voxelize import TdfConfig, partition_blocks, shift_to_origin, voxelize, write_grid

log = logging.getLogger("pcqa")

POINT_METRICS = ("d1-mse", "d2-mse", "d1-psnr", "d2-psnr")
PL_METRICS = {"bin-pl": "binary", "tdf-pl": "tdf"}
METRICS = POINT_METRICS + VOXEL_METRICS + tuple(PL_METRICS)


def _default_threads():
    try:
        return max(1, int(os.environ.get("PCQ_THREADS", "1")))
    except ValueError:
        return 1


def _fmt(v):
    return repr(float(v))


def _add_voxel_flags(p):
    p.add_argument("--block-size", type=int, default=64)
    p.add_argument("--u", type=float, default=5.0, help="TDF truncation distance (voxels)")


def _add_threads(p):
    p.add_argument("--threads", type=int, default=None,
                   help="worker threads (default: $PCQ_THREADS or 1)")


def build_parser():
    parser = argparse.ArgumentParser(prog="pcqa", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("voxelize", help="write per-block voxel grid dumps")
    p.add_argument("input")
    p.add_argument("--repr", choices=("binary", "tdf", "tsdf"), default="tdf")
    _add_voxel_flags(p)
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("metric", help="compare two point clouds")
    p.add_argument("reference")
    p.add_argument("distorted")
    p.add_argument("--metric", required=True, choices=METRICS)
    _add_voxel_flags(p)
    p.add_argument("--alpha", type=float, default=0.75, help="WBCE balancing weight")
    p.add_argument("--nabce-window", type=int, default=5)
    p.add_argument("--aggregation", choices=("L1", "L2"), default=None)
    p.add_argument("--resolution", type=float, default=None, help="PSNR resolution")
    p.add_argument("--bit-depth", type=int, default=None)
    p.add_argument("--file-normals", action="store_true",
                   help="use normals stored in the PLY files instead of estimating them")
    p.add_argument("--weights", help="autoencoder checkpoint (pl metrics)")
    p.add_argument("--feature", default="all", help="'all' or a 0-based feature map index")
    _add_threads(p)

    p = sub.add_parser("train", help="train the autoencoder")
    p.add_argument("data", nargs="?", help="directory of PLY files")
    p.add_argument("--synthetic", type=int, default=0,
                   help="train on N generated shapes instead of a data directory")
    p.add_argument("--repr", choices=("binary", "tdf"), default="tdf")
    p.add_argument("--loss", choices=("focal", "adaptive-mse"), default=None)
    _add_voxel_flags(p)
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--batch-size", type=int, default=1)
    p.add_argument("--lr", type=float, default=0.001)
    p.add_argument("--beta1", type=float, default=0.9)
    p.add_argument("--beta2", type=float, default=0.999)
    p.add_argument("--alpha", type=float, default=0.75)
    p.add_argument("--gamma", type=float, default=2.0)
    p.add_argument("--beta", type=float, default=0.01, help="adaptive MSE weight bound")
    p.add_argument("--channels", default="16,32,16")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    _add_threads(p)

    p = sub.add_parser("eval", help="cross-validated statistics from a score table")
    p.add_argument("scores")
    p.add_argument("--metrics", required=True, help="comma-separated metric columns")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--group-by", choices=("codec",), default=None)
    p.add_argument("--exclude-references", action="store_true")

    p = sub.add_parser("features", help="find unused maps and the best single map")
    p.add_argument("--weights", required=True)
    p.add_argument("--probe", required=True, help="directory of PLY files")
    _add_voxel_flags(p)
    p.add_argument("--scores", help="score table with per-map columns <prefix>-f<k>")
    p.add_argument("--prefix", default=None, help="column prefix (default bin-pl / tdf-pl)")
    p.add_argument("--fitted", action="store_true",
                   help="rank maps by PCC after logistic fitting")
    return parser


# ---------------------------------------------------------------------------


def cmd_voxelize(args):
    pc = read_ply(args.input)
    (pc,) = shift_to_origin(pc)
    if args.repr == "tsdf" and not pc.has_normals:
        pc = estimate_normals(pc)
    tdf = TdfConfig(args.u)
    os.makedirs(args.out, exist_ok=True)
    grid = partition_blocks(pc, args.block_size)
    for origin in grid.origins():
        vg = voxelize(grid.blocks[origin], args.block_size, args.repr, tdf)
        name = "block_{}_{}_{}.grid".format(*origin)
        write_grid(vg, os.path.join(args.out, name))
        print(name)
    return 0


def _with_normals(pc, use_file):
    if use_file and pc.has_normals:
        return pc
    return estimate_normals(pc)


def compute_metric(args, a: PointCloud, b: PointCloud) -> float:
    name = args.metric
    threads = args.threads or _default_threads()
    if name in POINT_METRICS:
        if name.startswith("d1"):
            mse = d1_mse(a, b)
        else:
            mse = d2_mse(_with_normals(a, args.file_normals), _with_normals(b, args.file_normals))
        if name.endswith("psnr"):
            if args.resolution is not None:
                res = args.resolution
            else:
                ref = PointCloud(a.points, bit_depth=args.bit_depth)
                res = default_resolution(ref)
            return geometry_psnr(mse, PsnrConfig(res))
        return mse
    a, b = shift_to_origin(a, b)
    tdf = TdfConfig(args.u)
    agg = args.aggregation or DEFAULT_AGGREGATION[name]
    if name in PL_METRICS:
        params = load_params(args.weights, expected_repr=PL_METRICS[name])
        sel = FeatureSelector.parse(args.feature)
        return perceptual_distance(a, b, params, sel, agg, args.block_size, tdf,
                                   threads=threads)
    cfg = VoxelMetricConfig(alpha=args.alpha, nabce_window=args.nabce_window, aggregation=agg)
    return cloud_voxel_metric(name, a, b, args.block_size, tdf, cfg, agg, threads)


def cmd_metric(args, parser):
    if args.metric in PL_METRICS and not args.weights:
        parser.error(f"--weights is required for {args.metric}")
    a = read_ply(args.reference)
    b = read_ply(args.distorted)
    print(_fmt(compute_metric(args, a, b)))
    return 0


def _training_blocks(args):
    tdf = TdfConfig(args.u)
    if args.synthetic:
        clouds = synthetic_blocks(args.synthetic, args.block_size, args.seed)
        return [voxelize(pc, args.block_size, args.repr, tdf).values for pc in clouds]
    if not args.data:
        raise EmptyInput("no training data: give a directory or --synthetic N")
    paths = list_ply(args.data) if os.path.isdir(args.data) else []
    if not paths:
        raise EmptyInput(f"no PLY files found in {args.data!r}")
    blocks = []
    for path in paths:
        (pc,) = shift_to_origin(read_ply(path))
        grid = partition_blocks(pc, args.block_size)
        for origin in grid.origins():
            blocks.append(voxelize(grid.blocks[origin], args.block_size, args.repr, tdf).values)
    return blocks


def cmd_train(args):
    loss = args.loss or ("focal" if args.repr == "binary" else "adaptive-mse")
    try:
        channels = tuple(int(c) for c in args.channels.split(","))
    except ValueError:
        raise InvalidArgument(f"bad --channels {args.channels!r}") from None
    cfg = TrainConfig(learning_rate=args.lr, beta1=args.beta1, beta2=args.beta2,
                      batch_size=args.batch_size, steps=args.steps, seed=args.seed,
                      loss=loss.replace("-", "_"), alpha=args.alpha, gamma=args.gamma,
                      beta=args.beta, channels=channels)
    blocks = _training_blocks(args)
    history = []
    params = train(blocks, cfg, repr=args.repr, history=history,
                   threads=args.threads or _default_threads())
    params.hyperparams.update({"block_size": args.block_size, "u": args.u})
    save_params(params, args.out)
    if history:
        log.info("loss %.6g -> %.6g over %d steps", history[0], history[-1], len(history))
    print(args.out)
    return 0


def cmd_eval(args):
    records = harness.read_scores_csv(args.scores)
    metrics = [m.strip() for m in args.metrics.split(",") if m.strip()]
    missing_cols = [m for m in metrics if records and m not in records[0].metric_scores]
    if missing_cols:
        raise MissingData(f"score table lacks metric column(s): {', '.join(missing_cols)}",
                          missing_cols)
    results = harness.report(records, metrics, not args.exclude_references)
    os.makedirs(args.out, exist_ok=True)
    harness.write_report(results, os.path.join(args.out, "report.csv"))
    harness.write_predictions(results, os.path.join(args.out, "predictions.csv"))
    print(os.path.join(args.out, "report.csv"))
    if args.group_by:
        for path in harness.write_group_reports(results, args.out, args.group_by):
            print(path)
    return 0


def cmd_features(args):
    params = load_params(args.weights)
    tdf = TdfConfig(args.u)
    paths = list_ply(args.probe) if os.path.isdir(args.probe) else [args.probe]
    probe = []
    for path in paths:
        (pc,) = shift_to_origin(read_ply(path))
        grid = partition_blocks(pc, args.block_size)
        probe += [voxelize(grid.blocks[o], args.block_size, params.repr, tdf).values
                  for o in grid.origins()]
    if not probe:
        raise EmptyInput("probe set is empty")
    usage = detect_unused_features(params, probe)
    for k, used in enumerate(usage.used):
        print(f"map {k}\t{'used' if used else 'unused'}\t"
              f"{_fmt(usage.minimum[k])}\t{_fmt(usage.maximum[k])}")
    if args.scores:
        prefix = args.prefix or ("bin-pl" if params.repr == "binary" else "tdf-pl")
        records = harness.read_scores_csv(args.scores)
        cols = [f"{prefix}-f{k}" for k in range(params.latent_channels)]
        absent = [c for c in cols if c not in records[0].metric_scores]
        if absent:
            raise MissingData(f"score table lacks column(s): {', '.join(absent)}", absent)
        scores = np.array([[r.metric_scores[c] for c in cols] for r in records])
        mos = [r.mos for r in records]
        best = select_best_feature(scores, mos, usage.unused_indices, fitted=args.fitted)
        print(f"best {best}")
    return 0


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "voxelize":
            return cmd_voxelize(args)
        if args.command == "metric":
            return cmd_metric(args, parser)
        if args.command == "train":
            return cmd_train(args)
        if args.command == "eval":
            return cmd_eval(args)
        if args.command == "features":
            return cmd_features(args)
    except (PCQAError, OSError) as exc:
        print(f"pcqa: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 2


if __name__ == "__main__":
    sys.exit(main())
