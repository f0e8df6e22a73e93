"""Perceptual distance: MSE between autoencoder latent representations."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .autoencoder import AutoencoderParams, analysis_forward
from .errors import (DegenerateInput, EmptyInput, InvalidArgument, NoUsableFeature,
                     ReprMismatch, ShapeMismatch)
from .harness import fit_logistic, pearson
from .pointcloud import PointCloud
from .voxel_metrics import aggregate_blocks
from .voxelize import TdfConfig, paired_blocks, voxelize

UNUSED_TOL = 1e-9


@dataclass(frozen=True)
class FeatureSelector:
    """All latent feature maps, or one map by 0-based index."""

    index: int | None = None

    @property
    def mode(self):
        return "all" if self.index is None else "single"

    @classmethod
    def parse(cls, text):
        text = str(text).strip().lower()
        if text == "all":
            return cls()
        try:
            return cls(int(text))
        except ValueError:
            raise InvalidArgument(f"feature selector must be 'all' or an index, got {text!r}")

    def select(self, y):
        if self.index is None:
            return y
        if not 0 <= self.index < y.shape[0]:
            raise InvalidArgument(f"feature map {self.index} outside [0, {y.shape[0]})")
        return y[self.index:self.index + 1]


ALL_FEATURES = FeatureSelector()


def latent_mse(y_a, y_b, sel: FeatureSelector = ALL_FEATURES) -> float:
    y_a = np.asarray(y_a, dtype=np.float64)
    y_b = np.asarray(y_b, dtype=np.float64)
    if y_a.shape != y_b.shape:
        raise ShapeMismatch(f"latent shapes differ: {y_a.shape} vs {y_b.shape}")
    d = sel.select(y_a) - sel.select(y_b)
    return float(np.mean(d * d))


def _block_input(block, size, repr_, tdf):
    grid = voxelize(block, size, repr_, tdf)
    return grid.values[None].astype(np.float32)


def block_latents(A: PointCloud, B: PointCloud, params: AutoencoderParams, block_size=64,
                  tdf: TdfConfig = TdfConfig(), threads=1):
    """Latent tensor pairs for every block of the union partition."""
    if len(A) == 0 or len(B) == 0:
        raise EmptyInput("perceptual distance needs non-empty clouds")
    repr_ = params.repr
    if repr_ not in ("binary", "tdf"):
        raise ReprMismatch(f"unsupported checkpoint representation {repr_!r}")

    def one(pair):
        _, a, b = pair
        ya = analysis_forward(_block_input(a, block_size, repr_, tdf), params)
        yb = analysis_forward(_block_input(b, block_size, repr_, tdf), params)
        return ya, yb

    pairs = list(paired_blocks(A, B, block_size))
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            return list(pool.map(one, pairs))
    return [one(p) for p in pairs]


def perceptual_distance(A: PointCloud, B: PointCloud, params: AutoencoderParams,
                        sel: FeatureSelector = ALL_FEATURES, agg="L1", block_size=64,
                        tdf: TdfConfig = TdfConfig(), repr=None, threads=1) -> float:
    """Block-aggregated latent MSE between two clouds (analysis transform only)."""
    if repr is not None and repr != params.repr:
        raise ReprMismatch(f"checkpoint representation {params.repr!r} != {repr!r}")
    latents = block_latents(A, B, params, block_size, tdf, threads)
    return aggregate_blocks([latent_mse(ya, yb, sel) for ya, yb in latents], agg)


def per_feature_distances(A, B, params, agg="L1", block_size=64, tdf=TdfConfig(), threads=1):
    """Perceptual distance for each single feature map, as an array of length F."""
    latents = block_latents(A, B, params, block_size, tdf, threads)
    f = params.latent_channels
    per_block = np.array([[latent_mse(ya, yb, FeatureSelector(k)) for k in range(f)]
                          for ya, yb in latents])
    return np.array([aggregate_blocks(per_block[:, k], agg) for k in range(f)])


@dataclass
class FeatureUsageReport:
    used: np.ndarray  # bool per feature map
    minimum: np.ndarray
    maximum: np.ndarray

    def __len__(self):
        return len(self.used)

    @property
    def unused_indices(self):
        return [int(i) for i in np.flatnonzero(~self.used)]


def detect_unused_features(params: AutoencoderParams, probe, tol=UNUSED_TOL) -> FeatureUsageReport:
    """Flag feature maps whose latent values stay constant over all probe blocks."""
    probe = list(probe)
    if not probe:
        raise EmptyInput("probe set is empty")
    f = params.latent_channels
    lo = np.full(f, np.inf)
    hi = np.full(f, -np.inf)
    for x in probe:
        x = np.asarray(x, dtype=params.analysis[0].weight.dtype)
        y = analysis_forward(x[None] if x.ndim == 3 else x, params).reshape(f, -1)
        lo = np.minimum(lo, y.min(axis=1))
        hi = np.maximum(hi, y.max(axis=1))
    return FeatureUsageReport(hi - lo >= tol, lo, hi)


def select_best_feature(per_map_scores, mos, unused=(), fitted=False) -> int:
    """Feature map whose scores correlate best (|PCC|) with MOS.

    With ``fitted`` the correlation is taken on logistic-fitted predictions.
    Ties go to the lowest index; ``unused`` maps are skipped.
    """
    scores = np.asarray(per_map_scores, dtype=np.float64)
    mos = np.asarray(mos, dtype=np.float64)
    if scores.ndim != 2 or scores.shape[0] != mos.size or mos.size < 2:
        raise InvalidArgument("scores must be (stimuli, F) with at least two stimuli")
    if np.any(np.isnan(mos)):
        raise InvalidArgument("MOS contains NaN")
    skip = set(int(i) for i in unused)
    best, best_r = None, -np.inf
    for k in range(scores.shape[1]):
        if k in skip:
            continue
        s = scores[:, k]
        try:
            if fitted:
                s = fit_logistic(s, mos).predict(s)
            r = abs(pearson(s, mos))
        except DegenerateInput:
            continue
        if r > best_r:
            best, best_r = k, r
    if best is None:
        raise NoUsableFeature("no feature map has usable scores")
    return best
