#!/usr/bin/env python3
"""
MLSREG-KIT Fragment
Stage II: initial temporal / spatial fragmentation and the semi-sphere check
that appends fragments until they hold three orthogonal surface families.
"""
import json
import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from cloud_io import Trajectory, write_ply
from core import (
    MissingAttributeError, PointCloud, RigidTransform, SpatialIndex,
    apply_transform, axis_rotation, compute_normals, rotation_about, unit_vectors,
)

logger = logging.getLogger(__name__)

SEED_IDS = ('+x', '-x', '+y', '-y', '+z')
CANONICAL_SEEDS = np.array([
    [1.0, 0.0, 0.0],
    [-1.0, 0.0, 0.0],
    [0.0, 1.0, 0.0],
    [0.0, -1.0, 0.0],
    [0.0, 0.0, 1.0],
])
EMPTY_DISPLACEMENT = 2.0
KMEANS_MAX_ITERATIONS = 50
LENGTH_TOL = 1e-9


@dataclass
class FragmentParams:
    strategy: str = field(default='ssc', metadata={"choices": ('ssc', 'fixed-time', 'fixed-length')})
    mode: str = field(default='temporal', metadata={"choices": ('temporal', 'spatial')})
    interval_s: float = field(default=10.0, metadata={"range": (0.1, 3600.0)})
    length_m: float = field(default=10.0, metadata={"range": (0.1, 10000.0)})
    min_traj_m: float = field(default=10.0, metadata={"range": (0.0, 10000.0)})
    disp_threshold: float = field(default=0.15, metadata={"range": (0.0, 2.0)})
    min_pop_fraction: float = field(default=0.02, metadata={"range": (0.0, 0.2)})
    max_span_fragments: int = field(default=6, metadata={"range": (1, 1000)})
    max_span_s: float = field(default=60.0, metadata={"range": (0.1, 36000.0)})
    normal_k: int = field(default=10, metadata={"range": (3, 200)})
    max_normals: int = field(default=50_000, metadata={"range": (100, 10_000_000)})
    discard_underpopulated: bool = False


class FragmentStatus(str, Enum):
    INITIAL = 'initial'
    VALIDATED = 'validated'
    VALIDATED_AT_CAP = 'validated-at-cap'
    REJECTED = 'rejected'
    MERGED = 'merged'


@dataclass
class ClusterDiagnostics:
    seed_id: str
    centroid: np.ndarray
    population: int
    displacement: float

    def to_dict(self) -> Dict[str, Any]:
        return {
            'seed': self.seed_id,
            'centroid': [float(v) for v in self.centroid],
            'population': self.population,
            'displacement': self.displacement,
        }


@dataclass
class SemiSphereProjection:
    """Unit directions on the upper hemisphere (z >= 0)."""

    directions: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.directions, dtype=np.float64).reshape(-1, 3)
        if (d[:, 2] < 0).any():
            raise ValueError("semi-sphere directions must have z >= 0")
        self.directions = d

    def __len__(self) -> int:
        return len(self.directions)


@dataclass
class SscAttempt:
    """One pass of the semi-sphere check over a (possibly appended) fragment."""

    members: List[int]
    point_count: int
    trajectory_length: float
    passed: bool
    reason: str
    mean_displacement: Optional[float] = None
    std_displacement: Optional[float] = None
    rotation_deg: float = 0.0
    alignment_degenerate: bool = False
    normals_used: int = 0
    diagnostics: List[ClusterDiagnostics] = field(default_factory=list)

    def to_dict(self) -> Dict[str, Any]:
        return {
            'members': self.members,
            'points': self.point_count,
            'trajectory_length_m': self.trajectory_length,
            'passed': self.passed,
            'reason': self.reason,
            'mean_displacement': self.mean_displacement,
            'std_displacement': self.std_displacement,
            'rotation_deg': self.rotation_deg,
            'alignment_degenerate': self.alignment_degenerate,
            'normals_used': self.normals_used,
            'seeds': [d.to_dict() for d in self.diagnostics],
        }


@dataclass
class Fragment:
    """Contiguous index range [start, stop) of the trajectory-ordered cloud."""

    id: int
    start: int
    stop: int
    t_start: float
    t_end: float
    trajectory_length: float = 0.0
    status: FragmentStatus = FragmentStatus.INITIAL
    merged_into: Optional[int] = None
    append_count: int = 0
    members: List[int] = field(default_factory=list)
    history: List[SscAttempt] = field(default_factory=list)

    @property
    def point_indices(self) -> range:
        return range(self.start, self.stop)

    @property
    def size(self) -> int:
        return self.stop - self.start

    @property
    def span_s(self) -> float:
        return self.t_end - self.t_start

    def take(self, cloud: PointCloud) -> PointCloud:
        return cloud.subset(slice(self.start, self.stop), name=f"{cloud.name}-f{self.id:03d}")

    def to_dict(self) -> Dict[str, Any]:
        return {
            'id': self.id,
            'start': self.start,
            'stop': self.stop,
            't_start': self.t_start,
            't_end': self.t_end,
            'trajectory_length_m': self.trajectory_length,
            'status': self.status.value,
            'merged_into': self.merged_into,
            'append_count': self.append_count,
            'members': self.members,
            'history': [a.to_dict() for a in self.history],
        }

    @classmethod
    def from_dict(cls, d: Dict[str, Any]) -> "Fragment":
        return cls(
            id=int(d['id']), start=int(d['start']), stop=int(d['stop']),
            t_start=float(d['t_start']), t_end=float(d['t_end']),
            trajectory_length=float(d.get('trajectory_length_m', 0.0)),
            status=FragmentStatus(d.get('status', 'initial')),
            merged_into=d.get('merged_into'),
            append_count=int(d.get('append_count', 0)),
            members=list(d.get('members', [])),
        )


@dataclass
class FragmentationResult:
    cloud: PointCloud
    order: np.ndarray
    fragments: List[Fragment]
    initial: List[Fragment]
    strategy: str

    def to_dict(self) -> Dict[str, Any]:
        return {
            'strategy': self.strategy,
            'point_count': len(self.cloud),
            'fragments': [f.to_dict() for f in self.fragments],
            'initial': [f.to_dict() for f in self.initial],
        }


# ============================================================================
#  ORDERING AND INITIAL FRAGMENTS
# ============================================================================

def point_times(cloud: PointCloud, trajectory: Optional[Trajectory] = None) -> np.ndarray:
    """Per-point time: gps_time, else the time of the nearest trajectory sample."""
    if cloud.gps_time is not None:
        return cloud.gps_time
    if trajectory is None or len(trajectory) == 0:
        raise MissingAttributeError(f"{cloud.name} has no gps_time and no trajectory was given")
    return trajectory.times[trajectory.nearest_sample(cloud.xyz)]


def order_for_fragmentation(cloud: PointCloud, trajectory: Optional[Trajectory] = None) -> Tuple[PointCloud, np.ndarray]:
    """Stable sort of the cloud along acquisition time so fragments are index ranges."""
    order = np.argsort(point_times(cloud, trajectory), kind='stable')
    if np.array_equal(order, np.arange(len(cloud))):
        return cloud, order
    return cloud.subset(order), order


def _split_bins(bins: np.ndarray) -> List[Tuple[int, int, int]]:
    """(bin, start, stop) runs of a nondecreasing bin array."""
    if len(bins) == 0:
        return []
    cuts = np.flatnonzero(np.diff(bins)) + 1
    starts = np.concatenate(([0], cuts))
    stops = np.concatenate((cuts, [len(bins)]))
    return [(int(bins[a]), int(a), int(b)) for a, b in zip(starts, stops)]


def initial_fragmentation(cloud: PointCloud, trajectory: Optional[Trajectory] = None, mode: str = 'temporal',
                          interval_s: float = 10.0, length_m: float = 10.0) -> List[Fragment]:
    """Consecutive fixed-interval fragments of a trajectory-ordered cloud.

    Empty intervals produce no fragment; the last fragment may be shorter.
    """
    if len(cloud) == 0:
        return []
    if mode == 'temporal':
        times = cloud.require_time('temporal fragmentation')
        if (np.diff(times) < 0).any():
            raise ValueError("cloud is not time ordered; call order_for_fragmentation first")
        t0, t_last = float(times[0]), float(times[-1])
        bins = np.floor((times - t0) / interval_s).astype(np.int64)
        runs = _split_bins(bins)
        edges = [(t0 + b * interval_s, min(t0 + (b + 1) * interval_s, t_last)) for b, _, _ in runs]
    elif mode == 'spatial':
        if trajectory is None or len(trajectory) < 2:
            raise ValueError("spatial fragmentation needs a trajectory with at least 2 samples")
        times = point_times(cloud, trajectory)
        if (np.diff(times) < 0).any():
            raise ValueError("cloud is not time ordered; call order_for_fragmentation first")
        s = trajectory.arclength_at(times)
        s0, t_last = float(s[0]), float(times[-1])
        bins = np.floor((s - s0 + LENGTH_TOL) / length_m).astype(np.int64)
        runs = _split_bins(bins)
        edges = []
        for b, _, _ in runs:
            lo = max(float(trajectory.time_at_arclength(s0 + b * length_m)), float(times[0]))
            hi = min(float(trajectory.time_at_arclength(s0 + (b + 1) * length_m)), t_last)
            edges.append((lo, max(hi, lo)))
    else:
        raise ValueError(f"unknown fragmentation mode {mode!r}")

    fragments = []
    for i, ((_, a, b), (t_start, t_end)) in enumerate(zip(runs, edges)):
        length = trajectory.length_between(t_start, t_end) if trajectory is not None and len(trajectory) else 0.0
        fragments.append(Fragment(i, a, b, t_start, t_end, length, members=[i]))
    logger.debug("initial fragmentation (%s): %d fragments over %d points", mode, len(fragments), len(cloud))
    return fragments


def fixed_fragmentation(cloud: PointCloud, trajectory: Optional[Trajectory] = None, interval_s: float = 30.0,
                        mode: str = 'temporal', length_m: float = 30.0) -> List[Fragment]:
    """Fixed-interval strategy without any validation, the comparison baseline."""
    fragments = initial_fragmentation(cloud, trajectory, mode, interval_s, length_m)
    for f in fragments:
        f.status = FragmentStatus.VALIDATED
    return fragments


def check_trajectory_length(fragment: Fragment, trajectory: Trajectory, min_length_m: float = 10.0) -> bool:
    """Update fragment.trajectory_length from the trajectory and test it against the minimum."""
    if not trajectory.covers(fragment.t_start, fragment.t_end):
        logger.warning("trajectory does not cover fragment %d span [%.3f, %.3f]",
                       fragment.id, fragment.t_start, fragment.t_end)
    fragment.trajectory_length = trajectory.length_between(fragment.t_start, fragment.t_end)
    return fragment.trajectory_length + LENGTH_TOL >= min_length_m


# ============================================================================
#  SEMI-SPHERE CHECK
# ============================================================================

@dataclass
class AxisAlignment:
    angle_deg: float
    transform: RigidTransform
    degenerate: bool = False


def align_longest_axis(cloud: PointCloud) -> Tuple[PointCloud, AxisAlignment]:
    """Rotate about the vertical axis through the centroid so the dominant
    horizontal principal direction maps onto +x. Angle in (-90, 90]."""
    if len(cloud) < 2:
        raise ValueError(f"align_longest_axis needs at least 2 points, got {len(cloud)}")
    xy = cloud.xyz[:, :2]
    centroid = cloud.xyz.mean(axis=0)
    centered = xy - centroid[:2]
    cov = centered.T @ centered / len(xy)
    evals, evecs = np.linalg.eigh(cov)
    scale = float(np.abs(centered).max())
    if evals[1] <= 1e-24 + 1e-20 * scale * scale:
        logger.warning("%s: points coincide in XY, axis alignment skipped", cloud.name)
        return cloud, AxisAlignment(0.0, RigidTransform.identity(), degenerate=True)
    major = evecs[:, 1]
    theta = math.degrees(math.atan2(major[1], major[0]))
    # rotating by -theta; fold into (-90, 90] since the axis has no sign
    angle = -theta
    while angle <= -90.0:
        angle += 180.0
    while angle > 90.0:
        angle -= 180.0
    transform = rotation_about(axis_rotation('z', angle), centroid)
    return apply_transform(cloud, transform), AxisAlignment(angle, transform)


def orient_and_project_normals(cloud: PointCloud, centroid: Optional[np.ndarray] = None) -> SemiSphereProjection:
    """Flip valid normals toward the centroid, then mirror onto z >= 0."""
    if cloud.normals is None:
        raise MissingAttributeError(f"{cloud.name}: projection needs normals")
    valid = cloud.normal_valid if cloud.normal_valid is not None else np.ones(len(cloud), bool)
    n = cloud.normals[valid]
    p = cloud.xyz[valid]
    c = cloud.xyz.mean(axis=0) if centroid is None else np.asarray(centroid, dtype=np.float64)
    flip = np.einsum('ij,ij->i', n, c - p) < 0
    n = np.where(flip[:, None], -n, n)
    n[:, 2] = np.abs(n[:, 2])
    n = unit_vectors(n)
    return SemiSphereProjection(n[np.linalg.norm(n, axis=1) > 0])


def kmeans_semisphere(projection: SemiSphereProjection,
                      max_iterations: int = KMEANS_MAX_ITERATIONS) -> List[ClusterDiagnostics]:
    """K=5 clustering seeded with the canonical axes, cosine assignment."""
    d = projection.directions
    if len(d) < 5:
        raise ValueError(f"kmeans_semisphere needs at least 5 directions, got {len(d)}")
    centroids = CANONICAL_SEEDS.copy()
    assign = np.argmax(d @ centroids.T, axis=1)
    for _ in range(max_iterations):
        for j in range(5):
            members = d[assign == j]
            if len(members):
                mean = members.sum(axis=0)
                norm = np.linalg.norm(mean)
                if norm > 0:
                    centroids[j] = mean / norm
        updated = np.argmax(d @ centroids.T, axis=1)
        if np.array_equal(updated, assign):
            break
        assign = updated

    populations = np.bincount(assign, minlength=5)
    out = []
    for j in range(5):
        if populations[j] == 0:
            disp = EMPTY_DISPLACEMENT
        else:
            disp = float(min(np.linalg.norm(centroids[j] - CANONICAL_SEEDS[j]), 2.0))
        out.append(ClusterDiagnostics(SEED_IDS[j], centroids[j].copy(), int(populations[j]), disp))
    return out


def dispersion_test(diagnostics: Sequence[ClusterDiagnostics], params: FragmentParams) -> Tuple[bool, str, float, float]:
    """(passed, reason, mean displacement, std displacement)."""
    total = sum(d.population for d in diagnostics)
    floor = params.min_pop_fraction * total
    if params.discard_underpopulated:
        kept = [d for d in diagnostics if d.population >= floor and d.population > 0]
        ids = {d.seed_id for d in kept}
        disp = np.array([d.displacement for d in kept]) if kept else np.array([EMPTY_DISPLACEMENT])
        mean, std = float(disp.mean()), float(disp.std())
        if not ({'+x', '-x'} & ids and {'+y', '-y'} & ids and '+z' in ids):
            return False, 'missing-axis-family', mean, std
        if mean > params.disp_threshold:
            return False, 'dispersion', mean, std
        return True, 'ok', mean, std
    disp = np.array([d.displacement for d in diagnostics])
    mean, std = float(disp.mean()), float(disp.std())
    if mean > params.disp_threshold:
        return False, 'dispersion', mean, std
    if any(d.population < floor for d in diagnostics):
        return False, 'underpopulated-seed', mean, std
    return True, 'ok', mean, std


def normal_sample(n: int, max_normals: int) -> np.ndarray:
    stride = max(1, math.ceil(n / max_normals))
    return np.arange(0, n, stride)


def semisphere_check(fragment_cloud: PointCloud, params: FragmentParams,
                     trajectory_length: float, members: List[int]) -> SscAttempt:
    """Run the check on one fragment cloud: length, alignment, normals, clustering."""
    n = len(fragment_cloud)
    if trajectory_length + LENGTH_TOL < params.min_traj_m:
        return SscAttempt(members, n, trajectory_length, False, 'short-trajectory')
    if n < max(params.normal_k + 1, 5):
        return SscAttempt(members, n, trajectory_length, False, 'too-few-points')
    aligned, alignment = align_longest_axis(fragment_cloud)
    idx = normal_sample(n, params.max_normals)
    normals, valid = compute_normals(SpatialIndex.of(aligned), aligned.xyz[idx], params.normal_k)
    sample = aligned.subset(idx).with_normals(normals, valid)
    projection = orient_and_project_normals(sample, centroid=aligned.xyz.mean(axis=0))
    attempt = SscAttempt(members, n, trajectory_length, False, '', rotation_deg=alignment.angle_deg,
                         alignment_degenerate=alignment.degenerate, normals_used=len(projection))
    if len(projection) < 5:
        attempt.reason = 'too-few-normals'
        return attempt
    attempt.diagnostics = kmeans_semisphere(projection)
    attempt.passed, attempt.reason, attempt.mean_displacement, attempt.std_displacement = \
        dispersion_test(attempt.diagnostics, params)
    return attempt


def _fragment_length(trajectory: Optional[Trajectory], t_start: float, t_end: float) -> float:
    if trajectory is None or len(trajectory) == 0:
        return 0.0
    return trajectory.length_between(t_start, t_end)


def ssc_validate(fragments: List[Fragment], cloud: PointCloud, trajectory: Optional[Trajectory],
                 params: FragmentParams) -> List[Fragment]:
    """Append initial fragments until each emitted fragment passes the check.

    Emitted fragments are numbered from 0; consumed initial fragments get
    status merged and merged_into set. A fragment that cannot grow because
    of the cap is emitted validated-at-cap. A failing trailing fragment with
    no successor is absorbed into the previously emitted fragment.
    """
    out: List[Fragment] = []
    i = 0
    while i < len(fragments):
        first = fragments[i]
        current = Fragment(len(out), first.start, first.stop, first.t_start, first.t_end, members=[first.id])
        j = i + 1
        while True:
            current.trajectory_length = _fragment_length(trajectory, current.t_start, current.t_end)
            attempt = semisphere_check(current.take(cloud), params, current.trajectory_length, list(current.members))
            current.history.append(attempt)
            logger.debug("ssc fragment=%d members=%s passed=%s reason=%s mean=%s",
                         current.id, current.members, attempt.passed, attempt.reason, attempt.mean_displacement)
            if attempt.passed:
                current.status = FragmentStatus.VALIDATED
                out.append(current)
                break
            if j >= len(fragments):
                if out:
                    _absorb(out[-1], current, trajectory)
                else:
                    current.status = FragmentStatus.VALIDATED_AT_CAP
                    logger.warning("fragment %d: only fragment failed the semi-sphere check (%s), emitted at cap",
                                   current.id, attempt.reason)
                    out.append(current)
                break
            nxt = fragments[j]
            if (len(current.members) >= params.max_span_fragments
                    or nxt.t_end - current.t_start > params.max_span_s + 1e-9):
                current.status = FragmentStatus.VALIDATED_AT_CAP
                logger.warning("fragment %d: reached max span (%d fragments, %.1f s) without passing (%s)",
                               current.id, len(current.members), current.span_s, attempt.reason)
                out.append(current)
                break
            current.stop = nxt.stop
            current.t_end = nxt.t_end
            current.members.append(nxt.id)
            current.append_count += 1
            j += 1
        i = j

    by_id = {f.id: f for f in fragments}
    for emitted in out:
        for fid in emitted.members:
            by_id[fid].merged_into = emitted.id
            by_id[fid].status = emitted.status if len(emitted.members) == 1 else FragmentStatus.MERGED
    return out


def _absorb(previous: Fragment, trailing: Fragment, trajectory: Optional[Trajectory]) -> None:
    logger.warning("fragment %d: trailing fragment %s failed the semi-sphere check, absorbed into fragment %d",
                   trailing.id, trailing.members, previous.id)
    previous.stop = trailing.stop
    previous.t_end = trailing.t_end
    previous.members.extend(trailing.members)
    previous.append_count += len(trailing.members)
    previous.trajectory_length = _fragment_length(trajectory, previous.t_start, previous.t_end)
    previous.history.extend(trailing.history)


def fragment_cloud(cloud: PointCloud, trajectory: Optional[Trajectory], params: FragmentParams,
                   fixed_interval_s: float = 30.0) -> FragmentationResult:
    """Order the cloud and fragment it with the configured strategy."""
    ordered, order = order_for_fragmentation(cloud, trajectory)
    if params.strategy == 'fixed-time':
        fragments = fixed_fragmentation(ordered, trajectory, fixed_interval_s)
        return FragmentationResult(ordered, order, fragments, fragments, params.strategy)
    if params.strategy == 'fixed-length':
        fragments = fixed_fragmentation(ordered, trajectory, mode='spatial', length_m=params.length_m)
        return FragmentationResult(ordered, order, fragments, fragments, params.strategy)
    initial = initial_fragmentation(ordered, trajectory, params.mode, params.interval_s, params.length_m)
    emitted = ssc_validate(initial, ordered, trajectory, params)
    logger.info("ssc: %d initial fragments -> %d emitted (%d at cap)", len(initial), len(emitted),
                sum(f.status == FragmentStatus.VALIDATED_AT_CAP for f in emitted))
    return FragmentationResult(ordered, order, emitted, initial, params.strategy)


# ============================================================================
#  EXPORT
# ============================================================================

def write_fragments_json(result: FragmentationResult, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(result.to_dict(), indent=2), encoding='utf-8')
    return path


def read_fragments_json(path) -> List[Fragment]:
    data = json.loads(Path(path).read_text(encoding='utf-8'))
    return [Fragment.from_dict(d) for d in data['fragments']]


def export_projection_ply(projection: SemiSphereProjection, path, diagnostics: Optional[Sequence[ClusterDiagnostics]] = None) -> Path:
    """Projected normals as points on the unit semi-sphere, labeled by nearest cluster."""
    labels = None
    if diagnostics is not None:
        centroids = np.array([d.centroid for d in diagnostics])
        labels = np.argmax(projection.directions @ centroids.T, axis=1)
    cloud = PointCloud(projection.directions, labels=labels, normals=projection.directions, name='semisphere')
    return write_ply(cloud, path, binary=False)
