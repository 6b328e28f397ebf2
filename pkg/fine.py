#!/usr/bin/env python3
"""
MLSREG-KIT Fine
Stage IIIb: joint voxelization of both clouds, planar-voxel selection by
normal consistency, and plane-to-plane generalized ICP on the planar points.
"""
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, List, Optional, Tuple

import numpy as np

from cloud_io import write_ply
from core import (
    PointCloud, RigidTransform, SpatialIndex, apply_transform, compose, crop_aabb,
    estimate_normals, invert, neighborhood_covariances, rodrigues,
)
from preprocess import group_by_cell, voxel_keys

logger = logging.getLogger(__name__)

MIN_CORRESPONDENCES = 6
LINE_SEARCH_HALVINGS = 8
PLANAR_COLOR = (0, 200, 0)
NONPLANAR_COLOR = (220, 0, 0)


class FineRegistrationError(RuntimeError):
    """Fine stage could not run (too few planar points or correspondences)."""


@dataclass
class GicpParams:
    covariance_k: int = field(default=20, metadata={"range": (3, 200)})
    plane_epsilon: float = field(default=1e-3, metadata={"range": (1e-9, 1.0)})
    max_corr_dist_m: float = field(default=1.0, metadata={"range": (1e-4, 100.0)})
    max_iterations: int = field(default=50, metadata={"range": (1, 10_000)})
    translation_eps_m: float = field(default=1e-6, metadata={"range": (0.0, 1.0)})
    rotation_eps_rad: float = field(default=1e-6, metadata={"range": (0.0, 1.0)})


@dataclass
class FineParams:
    voxel_edge_m: float = field(default=1.0, metadata={"range": (0.01, 100.0)})
    min_points: int = field(default=100, metadata={"range": (1, 1_000_000)})
    angle_deg: float = field(default=10.0, metadata={"range": (0.1, 90.0)})
    ratio: float = field(default=0.70, metadata={"range": (0.0, 1.0)})
    normal_k: int = field(default=20, metadata={"range": (3, 200)})
    crop_margin_m: float = field(default=2.0, metadata={"range": (0.0, 1000.0)})
    gicp: GicpParams = field(default_factory=GicpParams)


# ============================================================================
#  JOINT VOXEL GRID
# ============================================================================

@dataclass
class VoxelCell:
    key: Tuple[int, int, int]
    source_members: np.ndarray
    target_members: np.ndarray
    mean_normal: Optional[np.ndarray] = None
    consistency: float = 0.0
    planar: bool = False
    flagged: bool = False

    @property
    def count(self) -> int:
        return len(self.source_members) + len(self.target_members)


@dataclass
class VoxelGrid:
    """Cells of a grid anchored at the merged AABB min corner.

    source_cell / target_cell give each point's cell index into keys.
    """

    edge: float
    origin: np.ndarray
    keys: np.ndarray
    source_cell: np.ndarray
    target_cell: np.ndarray
    frame: Optional[RigidTransform] = None

    def __len__(self) -> int:
        return len(self.keys)

    def __iter__(self) -> Iterator[VoxelCell]:
        return iter(self.cells())

    def populations(self) -> Tuple[np.ndarray, np.ndarray]:
        n = len(self.keys)
        return np.bincount(self.source_cell, minlength=n), np.bincount(self.target_cell, minlength=n)

    def cells(self, selection: Optional["PlanarSelection"] = None) -> List[VoxelCell]:
        src_order = np.argsort(self.source_cell, kind='stable')
        tgt_order = np.argsort(self.target_cell, kind='stable')
        src_counts, tgt_counts = self.populations()
        src_split = np.split(src_order, np.cumsum(src_counts)[:-1])
        tgt_split = np.split(tgt_order, np.cumsum(tgt_counts)[:-1])
        out = []
        for i, key in enumerate(self.keys):
            cell = VoxelCell(tuple(int(v) for v in key), src_split[i], tgt_split[i])
            if selection is not None:
                cell.mean_normal = None if selection.flagged[i] else selection.mean_normals[i]
                cell.consistency = float(selection.consistency[i])
                cell.planar = bool(selection.planar[i])
                cell.flagged = bool(selection.flagged[i])
            out.append(cell)
        return out


def merged_voxel_grid(source: PointCloud, target: PointCloud, edge_m: float = 1.0,
                      frame: Optional[RigidTransform] = None) -> VoxelGrid:
    """Voxelize both clouds on one grid; half-open cells, floor convention.

    With frame, keys are computed in that frame's coordinates (the grid
    moves with the clouds).
    """
    if not edge_m > 0:
        raise ValueError(f"voxel edge must be > 0, got {edge_m}")
    if len(source) + len(target) == 0:
        raise ValueError("merged_voxel_grid needs at least one point")
    xyz = np.vstack([source.xyz, target.xyz])
    if frame is not None:
        xyz = invert(frame).apply(xyz)
    origin = xyz.min(axis=0)
    keys, inverse = group_by_cell(voxel_keys(xyz, edge_m, origin))
    return VoxelGrid(edge_m, origin, keys, inverse[:len(source)], inverse[len(source):], frame)


# ============================================================================
#  PLANAR SELECTION
# ============================================================================

@dataclass
class PlanarSelection:
    source_mask: np.ndarray
    target_mask: np.ndarray
    counts: np.ndarray
    centroids: np.ndarray
    mean_normals: np.ndarray
    consistency: np.ndarray
    planar: np.ndarray
    flagged: np.ndarray

    @property
    def planar_cells(self) -> int:
        return int(self.planar.sum())


def _normals_or_zero(cloud: PointCloud) -> np.ndarray:
    if cloud.normals is None:
        raise ValueError(f"{cloud.name}: planar classification needs normals")
    n = cloud.normals.copy()
    if cloud.normal_valid is not None:
        n[~cloud.normal_valid] = 0.0
    return n


def classify_planar(grid: VoxelGrid, source: PointCloud, target: PointCloud, min_points: int = 100,
                    angle_threshold_deg: float = 10.0, ratio_threshold: float = 0.70) -> PlanarSelection:
    """Mark cells whose member normals agree with their mean direction.

    Normals are flipped into the hemisphere of each cell's dominant normal
    direction before averaging. C is the fraction of members within the
    angle threshold of the mean; invalid normals count as inconsistent.
    """
    n_cells = len(grid)
    normals = np.vstack([_normals_or_zero(source), _normals_or_zero(target)])
    xyz = np.vstack([source.xyz, target.xyz])
    cell = np.concatenate([grid.source_cell, grid.target_cell])
    order = np.argsort(cell, kind='stable')
    counts = np.bincount(cell, minlength=n_cells)
    occupied = np.flatnonzero(counts > 0)
    starts = np.concatenate(([0], np.cumsum(counts)[:-1]))[occupied]
    n_sorted = normals[order]
    cell_sorted = cell[order]

    centroids = np.zeros((n_cells, 3))
    centroids[occupied] = np.add.reduceat(xyz[order], starts, axis=0) / counts[occupied, None]

    scatter = np.zeros((n_cells, 3, 3))
    scatter[occupied] = np.add.reduceat(
        np.einsum('ni,nj->nij', n_sorted, n_sorted).reshape(-1, 9), starts, axis=0).reshape(-1, 3, 3)
    dominant = np.linalg.eigh(scatter)[1][:, :, 2]
    sign = np.where(np.einsum('ij,ij->i', n_sorted, dominant[cell_sorted]) < 0, -1.0, 1.0)
    aligned = n_sorted * sign[:, None]

    mean = np.zeros((n_cells, 3))
    mean[occupied] = np.add.reduceat(aligned, starts, axis=0) / counts[occupied, None]
    norm = np.linalg.norm(mean, axis=1)
    flagged = (counts > 0) & (norm <= 1e-12)
    mean_normals = np.divide(mean, norm[:, None], out=np.zeros_like(mean), where=norm[:, None] > 1e-12)

    cos_thr = math.cos(math.radians(angle_threshold_deg))
    consistent = np.einsum('ij,ij->i', aligned, mean_normals[cell_sorted]) >= cos_thr
    consistency = np.zeros(n_cells)
    consistency[occupied] = np.add.reduceat(consistent.astype(np.float64), starts) / counts[occupied]

    planar = (counts >= min_points) & (consistency >= ratio_threshold) & ~flagged
    if flagged.any():
        logger.debug("classify_planar: %d cells with a zero mean normal", int(flagged.sum()))
    return PlanarSelection(
        source_mask=planar[grid.source_cell],
        target_mask=planar[grid.target_cell],
        counts=counts, centroids=centroids, mean_normals=mean_normals,
        consistency=consistency, planar=planar, flagged=flagged,
    )


# ============================================================================
#  GICP
# ============================================================================

@dataclass
class GicpDiagnostics:
    iterations: int
    final_cost: float
    initial_cost: float
    converged: bool
    correspondences: int
    cost_trace: List[float] = field(default_factory=list)
    # line search found no step that lowers the cost
    stalled: bool = False


def plane_covariances(xyz: np.ndarray, k: int, epsilon: float, rows: Optional[np.ndarray] = None) -> np.ndarray:
    """Per-point covariance with eigenvalues replaced by (epsilon, 1, 1).

    With rows, only those points are queried (neighbors still come from all of xyz).
    """
    index = SpatialIndex(xyz)
    query = xyz if rows is None else xyz[rows]
    _, nbrs = index.knn(query, min(k, len(xyz)))
    _, cov = neighborhood_covariances(xyz, nbrs)
    _, v = np.linalg.eigh(cov)
    return np.einsum('nij,j,nkj->nik', v, np.array([epsilon, 1.0, 1.0]), v)


def cloud_covariances(cloud: PointCloud, params: GicpParams) -> np.ndarray:
    """Plane covariances I - (1 - eps) n n^T from the cloud's normals.

    Points without a valid normal, or clouds without normals, fall back to
    their own k-NN covariance.
    """
    if cloud.normals is None:
        return plane_covariances(cloud.xyz, params.covariance_k, params.plane_epsilon)
    n = cloud.normals
    cov = np.eye(3) - (1.0 - params.plane_epsilon) * np.einsum('ni,nj->nij', n, n)
    if cloud.normal_valid is not None and not cloud.normal_valid.all():
        missing = np.flatnonzero(~cloud.normal_valid)
        cov[missing] = plane_covariances(cloud.xyz, params.covariance_k, params.plane_epsilon, missing)
    return cov


def _skew(p: np.ndarray) -> np.ndarray:
    out = np.zeros((len(p), 3, 3))
    out[:, 0, 1], out[:, 0, 2] = -p[:, 2], p[:, 1]
    out[:, 1, 0], out[:, 1, 2] = p[:, 2], -p[:, 0]
    out[:, 2, 0], out[:, 2, 1] = -p[:, 1], p[:, 0]
    return out


class _GicpProblem:
    """Truncated GICP objective in coordinates centered on the target centroid."""

    def __init__(self, src: np.ndarray, tgt: np.ndarray, cov_src: np.ndarray, cov_tgt: np.ndarray,
                 params: GicpParams):
        self.src = src
        self.tgt = tgt
        self.params = params
        self.tree = SpatialIndex(tgt)
        self.cov_src = cov_src
        self.cov_tgt = cov_tgt
        self.cap = params.max_corr_dist_m ** 2 / (2.0 * params.plane_epsilon)

    def linearize(self, r: np.ndarray, t: np.ndarray):
        moved = self.src @ r.T + t
        dist, idx = self.tree.nearest(moved, self.params.max_corr_dist_m)
        matched = np.isfinite(dist)
        i = np.flatnonzero(matched)
        j = idx[matched]
        combined = self.cov_tgt[j] + np.einsum('ij,njk,lk->nil', r, self.cov_src[i], r)
        info = np.linalg.inv(combined)
        residual = self.tgt[j] - moved[i]
        mahal = np.einsum('ni,nij,nj->n', residual, info, residual)
        cost = float(np.minimum(mahal, self.cap).sum() + self.cap * (len(moved) - len(i)))
        return cost, moved[i], residual, info, mahal, len(i)

    def cost(self, r: np.ndarray, t: np.ndarray) -> float:
        return self.linearize(r, t)[0]


def gicp(source_planar: PointCloud, target_planar: PointCloud, initial: Optional[RigidTransform] = None,
         params: Optional[GicpParams] = None) -> Tuple[RigidTransform, GicpDiagnostics]:
    """Plane-to-plane generalized ICP by damped Gauss-Newton.

    Accepted iterates never increase the truncated objective (matched
    residuals capped at max_corr^2 / (2 eps), unmatched points at the cap).
    Covariances come from the clouds' normals when they carry them. A solve
    whose line search finds no descent stops with stalled set; it counts
    as converged only if the rejected step was already below the eps bounds.
    """
    params = params or GicpParams()
    initial = initial or RigidTransform.identity()
    if len(source_planar) < params.covariance_k or len(target_planar) < params.covariance_k:
        raise FineRegistrationError(
            f"gicp needs at least {params.covariance_k} points per cloud, "
            f"got {len(source_planar)} and {len(target_planar)}")

    center = target_planar.xyz.mean(axis=0)
    problem = _GicpProblem(source_planar.xyz - center, target_planar.xyz - center,
                           cloud_covariances(source_planar, params), cloud_covariances(target_planar, params), params)
    r = initial.rotation.copy()
    t = initial.rotation @ center + initial.translation - center

    cost, moved, residual, info, mahal, n_corr = problem.linearize(r, t)
    initial_cost = cost
    trace = [cost]
    converged = stalled = False
    iterations = 0
    while iterations < params.max_iterations:
        if n_corr < MIN_CORRESPONDENCES:
            raise FineRegistrationError(f"only {n_corr} correspondences within {params.max_corr_dist_m} m")
        iterations += 1
        # inlier residuals only; capped ones carry no gradient
        use = mahal < problem.cap
        jac = np.concatenate([_skew(moved[use]), np.broadcast_to(-np.eye(3), (int(use.sum()), 3, 3))], axis=2)
        h = np.einsum('nki,nkl,nlj->ij', jac, info[use], jac)
        g = np.einsum('nki,nkl,nl->i', jac, info[use], residual[use])
        try:
            delta = -np.linalg.solve(h, g)
        except np.linalg.LinAlgError:
            delta = -np.linalg.lstsq(h, g, rcond=None)[0]

        accepted = False
        step = delta
        for _ in range(LINE_SEARCH_HALVINGS + 1):
            dr = rodrigues(step[:3])
            r_new, t_new = dr @ r, dr @ t + step[3:]
            lin = problem.linearize(r_new, t_new)
            if lin[0] <= cost:
                accepted = True
                break
            step = step * 0.5
        if not accepted:
            stalled = True
            converged = _below_eps(delta, params)
            break
        r, t = r_new, t_new
        cost, moved, residual, info, mahal, n_corr = lin
        trace.append(cost)
        if _below_eps(step, params):
            converged = True
            break

    if stalled:
        logger.debug("gicp: line search stalled after %d iterations (converged=%s)", iterations, converged)
    transform = RigidTransform(r, t - r @ center + center)
    return transform, GicpDiagnostics(iterations, cost, initial_cost, converged, n_corr, trace, stalled)


def _below_eps(step: np.ndarray, params: GicpParams) -> bool:
    return bool(np.linalg.norm(step[:3]) < params.rotation_eps_rad and np.linalg.norm(step[3:]) < params.translation_eps_m)


# ============================================================================
#  PV-GICP DRIVER
# ============================================================================

@dataclass
class PvGicpReport:
    iterations: int = 0
    converged: bool = False
    stalled: bool = False
    final_cost: float = 0.0
    correspondences: int = 0
    source_planar_fraction: float = 0.0
    target_planar_fraction: float = 0.0
    cells: int = 0
    planar_cells: int = 0
    planar_extraction_s: float = 0.0
    gicp_s: float = 0.0
    planar_points: int = 0
    cost_trace: List[float] = field(default_factory=list)

    @property
    def planar_fraction(self) -> float:
        return self.source_planar_fraction


def _with_normals(cloud: PointCloud, k: int) -> PointCloud:
    if cloud.normals is not None:
        return cloud
    return estimate_normals(cloud, k)


def select_planar(source: PointCloud, target: PointCloud, params: FineParams) -> Tuple[PointCloud, PointCloud, PlanarSelection, VoxelGrid]:
    source = _with_normals(source, params.normal_k)
    target = _with_normals(target, params.normal_k)
    grid = merged_voxel_grid(source, target, params.voxel_edge_m)
    selection = classify_planar(grid, source, target, params.min_points, params.angle_deg, params.ratio)
    return (source.subset(np.flatnonzero(selection.source_mask)),
            target.subset(np.flatnonzero(selection.target_mask)), selection, grid)


def pv_gicp(source: PointCloud, target: PointCloud, coarse_t: RigidTransform,
            params: Optional[FineParams] = None) -> Tuple[RigidTransform, PvGicpReport]:
    """Planar-voxel GICP; the result is compose(fine, coarse_t)."""
    params = params or FineParams()
    report = PvGicpReport()
    moved = apply_transform(source, coarse_t).with_normals(None)
    target = crop_aabb(target, moved.aabb().dilate(params.crop_margin_m + params.gicp.max_corr_dist_m))
    if len(target) == 0:
        raise FineRegistrationError("reference is empty around the coarsely aligned fragment")

    tick = time.perf_counter()
    planar_src, planar_tgt, selection, grid = select_planar(moved, target, params)
    report.planar_extraction_s = time.perf_counter() - tick
    report.cells = len(grid)
    report.planar_cells = selection.planar_cells
    report.source_planar_fraction = len(planar_src) / max(len(moved), 1)
    report.target_planar_fraction = len(planar_tgt) / max(len(target), 1)
    report.planar_points = len(planar_src) + len(planar_tgt)

    tick = time.perf_counter()
    fine_t, diag = gicp(planar_src, planar_tgt, RigidTransform.identity(), params.gicp)
    report.gicp_s = time.perf_counter() - tick
    report.iterations = diag.iterations
    report.converged = diag.converged
    report.stalled = diag.stalled
    report.final_cost = diag.final_cost
    report.correspondences = diag.correspondences
    report.cost_trace = diag.cost_trace
    return compose(fine_t, coarse_t), report


def plain_gicp(source: PointCloud, target: PointCloud, coarse_t: RigidTransform,
               params: Optional[FineParams] = None) -> Tuple[RigidTransform, GicpDiagnostics, float]:
    """GICP on the full clouds (no planar selection); returns the wall time too.

    Normals are dropped so covariances come from each cloud's own k-NN.
    """
    params = params or FineParams()
    moved = apply_transform(source, coarse_t).with_normals(None)
    target = crop_aabb(target, moved.aabb().dilate(params.crop_margin_m + params.gicp.max_corr_dist_m))
    target = target.with_normals(None)
    tick = time.perf_counter()
    fine_t, diag = gicp(moved, target, RigidTransform.identity(), params.gicp)
    return compose(fine_t, coarse_t), diag, time.perf_counter() - tick


def export_planar_cells(source: PointCloud, target: PointCloud, selection: PlanarSelection,
                        path_prefix) -> Tuple[Path, Path]:
    """Planar (green) and non-planar (red) points of both clouds as two PLYs."""
    xyz = np.vstack([source.xyz, target.xyz])
    mask = np.concatenate([selection.source_mask, selection.target_mask])
    prefix = str(path_prefix)
    paths = []
    for suffix, keep, color in (('planar', mask, PLANAR_COLOR), ('nonplanar', ~mask, NONPLANAR_COLOR)):
        pts = xyz[keep]
        colors = np.tile(np.array(color, dtype=np.uint8), (len(pts), 1))
        paths.append(write_ply(PointCloud(pts, colors=colors, name=suffix), f"{prefix}_{suffix}.ply"))
    return paths[0], paths[1]
