#!/usr/bin/env python3
"""
MLSREG-KIT Preprocess
Stage I: voxel resampling, statistical outlier removal, static-class retention.
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, Iterable, Tuple

import numpy as np

from core import MissingAttributeError, PointCloud, SpatialIndex

logger = logging.getLogger(__name__)

# ASPRS codes: ground, building, road surface
STATIC_LABELS = (2, 6, 11)
SOR_CHUNK = 500_000


@dataclass
class PreprocessParams:
    cell_size_m: float = field(default=0.02, metadata={"range": (1e-4, 100.0)})
    voxel_enabled: bool = True
    sor_enabled: bool = True
    sor_k: int = field(default=16, metadata={"range": (1, 1000)})
    sor_stddev: float = field(default=1.0, metadata={"range": (0.0, 100.0)})
    filter_static: bool = True
    static_labels: Tuple[int, ...] = field(default=STATIC_LABELS, metadata={"range": (0, 65535)})


def voxel_keys(xyz: np.ndarray, cell_size: float, origin: np.ndarray) -> np.ndarray:
    """Integer cell coordinates floor((p - origin) / cell), half-open cells."""
    return np.floor((xyz - origin) / cell_size).astype(np.int64)


def group_by_cell(keys: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Unique cell keys (sorted) and the inverse mapping point -> cell."""
    if len(keys) == 0:
        return keys.reshape(0, 3), np.zeros(0, dtype=np.intp)
    lo = keys.min(axis=0)
    dims = keys.max(axis=0) - lo + 1
    if float(np.prod(dims.astype(np.float64))) < 2**62:
        linear = np.ravel_multi_index((keys - lo).T, dims)
        uniq, first, inverse = np.unique(linear, return_index=True, return_inverse=True)
        return keys[first], inverse.reshape(-1)
    uniq, inverse = np.unique(keys, axis=0, return_inverse=True)
    return uniq, inverse.reshape(-1)


def _mode_per_group(inverse: np.ndarray, values: np.ndarray, groups: int) -> np.ndarray:
    """Most frequent value per group, ties to the smallest value."""
    pairs, counts = np.unique(np.column_stack([inverse, values.astype(np.int64)]), axis=0, return_counts=True)
    order = np.lexsort((pairs[:, 1], -counts, pairs[:, 0]))
    pairs = pairs[order]
    first = np.concatenate(([True], pairs[1:, 0] != pairs[:-1, 0]))
    out = np.zeros(groups, dtype=values.dtype)
    out[pairs[first, 0]] = pairs[first, 1]
    return out


def voxel_downsample(cloud: PointCloud, cell_size: float = 0.02) -> PointCloud:
    """One point per occupied voxel at the centroid of its members.

    The grid is anchored at the cloud's AABB min corner. gps_time and
    intensity are averaged, labels take the member mode, normals are dropped.
    """
    if not cell_size > 0:
        raise ValueError(f"cell_size must be > 0, got {cell_size}")
    if len(cloud) == 0:
        return cloud
    keys = voxel_keys(cloud.xyz, cell_size, cloud.xyz.min(axis=0))
    _, inverse = group_by_cell(keys)
    groups = int(inverse.max()) + 1
    counts = np.bincount(inverse, minlength=groups).astype(np.float64)

    def mean(values: np.ndarray) -> np.ndarray:
        return np.bincount(inverse, weights=values, minlength=groups) / counts

    xyz = np.column_stack([mean(cloud.xyz[:, i]) for i in range(3)])
    colors = None
    if cloud.colors is not None:
        colors = np.column_stack([np.rint(mean(cloud.colors[:, i].astype(np.float64))) for i in range(3)])
    out = PointCloud(
        xyz,
        gps_time=None if cloud.gps_time is None else mean(cloud.gps_time),
        labels=None if cloud.labels is None else _mode_per_group(inverse, cloud.labels, groups),
        intensity=None if cloud.intensity is None else mean(cloud.intensity),
        colors=colors,
        name=cloud.name,
    )
    logger.debug("voxel_downsample %s: %d -> %d points (cell %.3f m)", cloud.name, len(cloud), len(out), cell_size)
    return out


def mean_neighbor_distance(cloud: PointCloud, k: int) -> np.ndarray:
    index = SpatialIndex.of(cloud)
    out = np.empty(len(cloud))
    for start in range(0, len(cloud), SOR_CHUNK):
        block = cloud.xyz[start:start + SOR_CHUNK]
        dist, _ = index.knn(block, k + 1)
        out[start:start + len(block)] = dist[:, 1:].mean(axis=1)
    return out


def statistical_outlier_removal(cloud: PointCloud, k: int = 16, stddev_mult: float = 1.0) -> PointCloud:
    """Drop points whose mean k-NN distance exceeds mean + stddev_mult * std.

    Statistics are global and computed once before removal. A relative
    tolerance of 1e-9 on the threshold keeps zero-variance clouds intact.
    """
    if len(cloud) <= k:
        raise ValueError(f"SOR needs more than k={k} points, {cloud.name} has {len(cloud)}")
    d = mean_neighbor_distance(cloud, k)
    threshold = d.mean() + stddev_mult * d.std()
    keep = d <= threshold * (1.0 + 1e-9) + 1e-15
    removed = int((~keep).sum())
    logger.debug("SOR %s: removed %d of %d (threshold %.4f m)", cloud.name, removed, len(cloud), threshold)
    return cloud.subset(np.flatnonzero(keep)) if removed else cloud


def filter_static(cloud: PointCloud, static_labels: Iterable[int] = STATIC_LABELS) -> PointCloud:
    """Keep exactly the points whose class label is in static_labels."""
    if cloud.labels is None:
        raise MissingAttributeError(
            f"{cloud.name} has no class labels; set pre.filter_static = false to skip static filtering")
    wanted = np.fromiter(set(int(v) for v in static_labels), dtype=np.int64)
    return cloud.subset(np.flatnonzero(np.isin(cloud.labels, wanted)))


def preprocess_cloud(cloud: PointCloud, params: PreprocessParams) -> Tuple[PointCloud, Dict[str, int]]:
    """Run the enabled Stage I filters in order; returns the cloud and point counts."""
    counts = {'input': len(cloud)}
    if params.filter_static:
        cloud = filter_static(cloud, params.static_labels)
        counts['static'] = len(cloud)
    if params.voxel_enabled:
        cloud = voxel_downsample(cloud, params.cell_size_m)
        counts['voxel'] = len(cloud)
    if params.sor_enabled and len(cloud) > params.sor_k:
        cloud = statistical_outlier_removal(cloud, params.sor_k, params.sor_stddev)
        counts['sor'] = len(cloud)
    logger.info("preprocess %s: %s", cloud.name, ' '.join(f"{k}={v}" for k, v in counts.items()))
    return cloud, counts
