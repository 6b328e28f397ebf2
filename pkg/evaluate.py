#!/usr/bin/env python3
"""
MLSREG-KIT Evaluate
Patch-based accuracy assessment: simplified M3C2 distances on axis-labeled
planar patches, aggregated per axis, per fragment and overall.
"""
import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from core import Aabb, PointCloud, SpatialIndex, crop_aabb, estimate_normals
from fine import FineParams, classify_planar, merged_voxel_grid

logger = logging.getLogger(__name__)

AXES = ('X', 'Y', 'Z')
AXIS_VECTORS = {'X': np.array([1.0, 0.0, 0.0]), 'Y': np.array([0.0, 1.0, 0.0]), 'Z': np.array([0.0, 0.0, 1.0])}
AXIS_LABEL_MIN = 0.8
PATCH_COLUMNS = ['cx', 'cy', 'cz', 'nx', 'ny', 'nz', 'axis', 'radius', 'depth']
ERROR_BAND_M = 0.02


@dataclass
class EvaluateParams:
    per_axis: int = field(default=20, metadata={"range": (0, 10_000)})
    min_points: int = field(default=10, metadata={"range": (1, 1_000_000)})
    patch_radius_m: float = field(default=0.5, metadata={"range": (1e-3, 100.0)})
    patch_depth_m: float = field(default=0.5, metadata={"range": (1e-3, 100.0)})
    signed: bool = False
    patches_file: str = ''
    align_min: float = field(default=0.9, metadata={"range": (AXIS_LABEL_MIN, 1.0)})


@dataclass(frozen=True, eq=False)
class PatchDefinition:
    center: np.ndarray
    normal: np.ndarray
    axis: str
    radius: float = 0.5
    depth: float = 0.5

    def __post_init__(self):
        center = np.asarray(self.center, dtype=np.float64).reshape(3)
        normal = np.asarray(self.normal, dtype=np.float64).reshape(3)
        norm = float(np.linalg.norm(normal))
        if norm == 0 or not np.isfinite(norm):
            raise ValueError("patch normal must be a nonzero finite vector")
        normal = normal / norm
        if self.axis not in AXES:
            raise ValueError(f"patch axis must be one of {AXES}, got {self.axis!r}")
        if not self.radius > 0 or not self.depth > 0:
            raise ValueError("patch radius and depth must be > 0")
        if abs(float(normal @ AXIS_VECTORS[self.axis])) < AXIS_LABEL_MIN:
            raise ValueError(f"patch normal {normal.round(3).tolist()} does not match axis {self.axis}")
        object.__setattr__(self, 'center', center)
        object.__setattr__(self, 'normal', normal)


@dataclass
class AxisErrorSummary:
    axis_means: Dict[str, Optional[float]] = field(default_factory=dict)
    axis_counts: Dict[str, int] = field(default_factory=dict)
    undefined: int = 0
    fragment_mean: Optional[float] = None
    patch_errors: List[Tuple[str, float]] = field(default_factory=list)

    @property
    def missing_axes(self) -> List[str]:
        return [a for a, m in self.axis_means.items() if m is None]

    def to_dict(self) -> Dict:
        return {
            'axis_means_m': self.axis_means,
            'axis_counts': self.axis_counts,
            'undefined_patches': self.undefined,
            'fragment_mean_m': self.fragment_mean,
            'patch_errors_m': [[a, v] for a, v in self.patch_errors],
        }


# ============================================================================
#  M3C2 PATCH DISTANCE
# ============================================================================

def cylinder_projections(xyz: np.ndarray, patch: PatchDefinition,
                         index: Optional[SpatialIndex] = None) -> np.ndarray:
    """Axial coordinates of the points inside the patch cylinder."""
    if index is not None:
        reach = float(np.hypot(patch.radius, patch.depth))
        hits = index.radius(patch.center[None, :], reach)[0]
        xyz = xyz[np.asarray(hits, dtype=np.intp)]
    rel = xyz - patch.center
    axial = rel @ patch.normal
    radial2 = np.einsum('ij,ij->i', rel, rel) - axial ** 2
    inside = (np.abs(axial) <= patch.depth) & (radial2 <= patch.radius ** 2)
    return axial[inside]


def m3c2_patch_distance(reference: PointCloud, registered: PointCloud, patch: PatchDefinition,
                        min_points: int = 10, reference_index: Optional[SpatialIndex] = None,
                        registered_index: Optional[SpatialIndex] = None) -> Optional[float]:
    """Mean axial position of registered minus that of reference; None if a side has < min_points."""
    ref = cylinder_projections(reference.xyz, patch, reference_index)
    reg = cylinder_projections(registered.xyz, patch, registered_index)
    if len(ref) < min_points or len(reg) < min_points:
        return None
    return float(reg.mean() - ref.mean())


def evaluate_fragment(reference: PointCloud, registered: PointCloud, patches: Sequence[PatchDefinition],
                      min_points: int = 10, signed: bool = False) -> AxisErrorSummary:
    """Per-axis mean |M3C2| over valid patches and their mean for the fragment."""
    ref_index = SpatialIndex.of(reference)
    reg_index = SpatialIndex.of(registered)
    per_axis: Dict[str, List[float]] = {}
    summary = AxisErrorSummary()
    for patch in patches:
        per_axis.setdefault(patch.axis, [])
        d = m3c2_patch_distance(reference, registered, patch, min_points, ref_index, reg_index)
        if d is None:
            summary.undefined += 1
            continue
        per_axis[patch.axis].append(d)
        summary.patch_errors.append((patch.axis, d))

    for axis in AXES:
        if axis not in per_axis:
            continue
        values = np.asarray(per_axis[axis])
        summary.axis_counts[axis] = len(values)
        if len(values) == 0:
            logger.warning("evaluate %s: no valid patch on axis %s", registered.name, axis)
            summary.axis_means[axis] = None
            continue
        summary.axis_means[axis] = float(values.mean() if signed else np.abs(values).mean())

    available = [m for m in summary.axis_means.values() if m is not None]
    summary.fragment_mean = float(np.mean(available)) if available else None
    if summary.undefined:
        logger.debug("evaluate %s: %d undefined patches", registered.name, summary.undefined)
    return summary


def overall_mean(summaries: Sequence[Optional[AxisErrorSummary]],
                 band_m: float = ERROR_BAND_M) -> Tuple[Optional[float], Optional[float]]:
    """Mean of fragment means and the fraction of per-patch |errors| below band_m."""
    means = [s.fragment_mean for s in summaries if s is not None and s.fragment_mean is not None]
    errors = np.array([abs(v) for s in summaries if s is not None for _, v in s.patch_errors])
    mean = float(np.mean(means)) if means else None
    fraction = float((errors < band_m).mean()) if len(errors) else None
    return mean, fraction


# ============================================================================
#  PATCH GENERATION
# ============================================================================

def _farthest_point_order(points: np.ndarray, first: int, count: int) -> List[int]:
    chosen = [first]
    dist = np.linalg.norm(points - points[first], axis=1)
    while len(chosen) < count:
        nxt = int(np.argmax(dist))
        if dist[nxt] <= 0:
            break
        chosen.append(nxt)
        dist = np.minimum(dist, np.linalg.norm(points - points[nxt], axis=1))
    return chosen


def auto_generate_patches(reference: PointCloud, fragment_region: Union[Aabb, PointCloud], per_axis: int = 20,
                          params: Optional[EvaluateParams] = None, fine_params=None) -> List[PatchDefinition]:
    """Patches at planar-cell centroids of the reference, spread by farthest-point sampling.

    Cells come from the same planar classification the fine stage uses;
    a cell serves axis e when |mean normal . e| >= align_min. Sampling
    starts from the most consistent cell.
    """
    params = params or EvaluateParams()
    fine_params = fine_params or FineParams()
    if per_axis <= 0:
        return []
    region = fragment_region.aabb() if isinstance(fragment_region, PointCloud) else fragment_region
    local = crop_aabb(reference, region)
    if len(local) == 0:
        logger.warning("auto_generate_patches: reference has no points in the fragment region")
        return []
    if local.normals is None:
        local = estimate_normals(local, fine_params.normal_k)

    empty = PointCloud(np.zeros((0, 3)), normals=np.zeros((0, 3)))
    grid = merged_voxel_grid(local, empty, fine_params.voxel_edge_m)
    selection = classify_planar(grid, local, empty, fine_params.min_points,
                                fine_params.angle_deg, fine_params.ratio)
    planar = np.flatnonzero(selection.planar)

    patches: List[PatchDefinition] = []
    for axis in AXES:
        alignment = np.abs(selection.mean_normals[planar] @ AXIS_VECTORS[axis])
        candidates = planar[alignment >= params.align_min]
        if len(candidates) < per_axis:
            logger.warning("auto_generate_patches: axis %s has %d of %d requested patches",
                           axis, len(candidates), per_axis)
        if len(candidates) == 0:
            continue
        first = int(np.argmax(selection.consistency[candidates]))
        order = _farthest_point_order(selection.centroids[candidates], first, min(per_axis, len(candidates)))
        for cell in candidates[order]:
            patches.append(PatchDefinition(
                selection.centroids[cell], selection.mean_normals[cell], axis,
                params.patch_radius_m, params.patch_depth_m,
            ))
    return patches


# ============================================================================
#  PATCH FILES
# ============================================================================

def write_patches(patches: Sequence[PatchDefinition], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', encoding='utf-8', newline='') as f:
        writer = csv.writer(f)
        writer.writerow(PATCH_COLUMNS)
        for p in patches:
            writer.writerow([*(repr(float(v)) for v in p.center), *(repr(float(v)) for v in p.normal),
                             p.axis, repr(float(p.radius)), repr(float(p.depth))])
    return path


def read_patches(path) -> List[PatchDefinition]:
    patches = []
    with open(path, 'r', encoding='utf-8', newline='') as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != PATCH_COLUMNS:
            raise ValueError(f"{path}: patch file header must be {','.join(PATCH_COLUMNS)}")
        for lineno, row in enumerate(reader, 2):
            try:
                patches.append(PatchDefinition(
                    [float(row['cx']), float(row['cy']), float(row['cz'])],
                    [float(row['nx']), float(row['ny']), float(row['nz'])],
                    row['axis'].strip().upper(), float(row['radius']), float(row['depth']),
                ))
            except (TypeError, ValueError) as e:
                raise ValueError(f"{path}:{lineno}: {e}") from None
    return patches
