#!/usr/bin/env python3
"""
MLSREG-KIT Core
Point clouds, rigid transforms, neighbor queries, normals and Kabsch fitting
shared by every stage.
"""
import logging
from dataclasses import dataclass, field, replace
from typing import Iterator, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial import cKDTree

logger = logging.getLogger(__name__)

ORTHO_TOL = 1e-9
GIMBAL_LIMIT_DEG = 89.0


class DegenerateGeometryError(ValueError):
    """Input geometry cannot determine the requested quantity."""


class MissingAttributeError(ValueError):
    """A stage needs a per-point attribute the cloud does not carry."""


# ============================================================================
#  POINTS AND CLOUDS
# ============================================================================

class Point3(NamedTuple):
    x: float
    y: float
    z: float
    gps_time: Optional[float] = None
    class_label: Optional[int] = None
    intensity: Optional[float] = None


def _optional(arr, n: int, dtype, width: int = 0, name: str = "") -> Optional[np.ndarray]:
    if arr is None:
        return None
    out = np.ascontiguousarray(arr, dtype=dtype)
    expected = (n, width) if width else (n,)
    if out.shape != expected:
        raise ValueError(f"{name} has shape {out.shape}, expected {expected}")
    return out


@dataclass(frozen=True, eq=False)
class PointCloud:
    """Column store of an ordered point sequence plus optional attributes.

    Instances are never mutated after construction; every operation returns
    a new cloud, so clouds are safe to share across threads.
    """

    xyz: np.ndarray
    gps_time: Optional[np.ndarray] = None
    labels: Optional[np.ndarray] = None
    intensity: Optional[np.ndarray] = None
    normals: Optional[np.ndarray] = None
    normal_valid: Optional[np.ndarray] = None
    colors: Optional[np.ndarray] = None
    name: str = "cloud"

    def __post_init__(self):
        xyz = np.ascontiguousarray(self.xyz, dtype=np.float64).reshape(-1, 3)
        if not np.isfinite(xyz).all():
            raise ValueError(f"{self.name}: coordinates must be finite")
        n = len(xyz)
        object.__setattr__(self, 'xyz', xyz)
        object.__setattr__(self, 'gps_time', _optional(self.gps_time, n, np.float64, name='gps_time'))
        object.__setattr__(self, 'labels', _optional(self.labels, n, np.uint16, name='labels'))
        object.__setattr__(self, 'intensity', _optional(self.intensity, n, np.float64, name='intensity'))
        object.__setattr__(self, 'normals', _optional(self.normals, n, np.float64, 3, 'normals'))
        object.__setattr__(self, 'colors', _optional(self.colors, n, np.uint8, 3, 'colors'))
        valid = self.normal_valid
        if self.normals is not None and valid is None:
            valid = np.ones(n, dtype=bool)
        if self.normals is None:
            valid = None
        object.__setattr__(self, 'normal_valid', _optional(valid, n, bool, name='normal_valid'))

    def __len__(self) -> int:
        return len(self.xyz)

    @classmethod
    def from_points(cls, points: Sequence[Point3], name: str = "cloud") -> "PointCloud":
        xyz = np.array([[p.x, p.y, p.z] for p in points], dtype=np.float64).reshape(-1, 3)
        times = labels = intensity = None
        if points and all(p.gps_time is not None for p in points):
            times = np.array([p.gps_time for p in points], dtype=np.float64)
        if points and all(p.class_label is not None for p in points):
            labels = np.array([p.class_label for p in points], dtype=np.uint16)
        if points and all(p.intensity is not None for p in points):
            intensity = np.array([p.intensity for p in points], dtype=np.float64)
        return cls(xyz, gps_time=times, labels=labels, intensity=intensity, name=name)

    def points(self) -> Iterator[Point3]:
        for i, (x, y, z) in enumerate(self.xyz):
            yield Point3(
                float(x), float(y), float(z),
                None if self.gps_time is None else float(self.gps_time[i]),
                None if self.labels is None else int(self.labels[i]),
                None if self.intensity is None else float(self.intensity[i]),
            )

    def subset(self, index, name: Optional[str] = None) -> "PointCloud":
        """Cloud restricted to an index array or boolean mask, attributes kept."""
        def pick(a):
            return None if a is None else a[index]
        return PointCloud(
            self.xyz[index], gps_time=pick(self.gps_time), labels=pick(self.labels),
            intensity=pick(self.intensity), normals=pick(self.normals),
            normal_valid=pick(self.normal_valid), colors=pick(self.colors),
            name=name or self.name,
        )

    def with_normals(self, normals: Optional[np.ndarray], valid: Optional[np.ndarray] = None) -> "PointCloud":
        return replace(self, normals=normals, normal_valid=valid)

    def with_colors(self, colors: Optional[np.ndarray]) -> "PointCloud":
        return replace(self, colors=colors)

    def renamed(self, name: str) -> "PointCloud":
        return replace(self, name=name)

    def aabb(self) -> "Aabb":
        if len(self) == 0:
            raise DegenerateGeometryError(f"{self.name}: empty cloud has no bounding box")
        return Aabb(self.xyz.min(axis=0), self.xyz.max(axis=0))

    def require_time(self, stage: str) -> np.ndarray:
        if self.gps_time is None:
            raise MissingAttributeError(f"{stage} needs per-point gps_time, {self.name} has none")
        return self.gps_time


def unit_vectors(v: np.ndarray) -> np.ndarray:
    """Row-normalize; zero rows stay zero."""
    v = np.asarray(v, dtype=np.float64)
    norm = np.linalg.norm(v, axis=-1, keepdims=True)
    return np.divide(v, norm, out=np.zeros_like(v), where=norm > 0)


# ============================================================================
#  BOUNDING BOXES
# ============================================================================

@dataclass(frozen=True, eq=False)
class Aabb:
    min_corner: np.ndarray
    max_corner: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.min_corner, dtype=np.float64).reshape(3)
        hi = np.asarray(self.max_corner, dtype=np.float64).reshape(3)
        if (lo > hi).any():
            raise ValueError(f"AABB min corner {lo} exceeds max corner {hi}")
        object.__setattr__(self, 'min_corner', lo)
        object.__setattr__(self, 'max_corner', hi)

    def merge(self, other: "Aabb") -> "Aabb":
        return Aabb(np.minimum(self.min_corner, other.min_corner),
                    np.maximum(self.max_corner, other.max_corner))

    def dilate(self, margin: float) -> "Aabb":
        return Aabb(self.min_corner - margin, self.max_corner + margin)

    def contains(self, xyz: np.ndarray) -> np.ndarray:
        xyz = np.asarray(xyz, dtype=np.float64).reshape(-1, 3)
        return ((xyz >= self.min_corner) & (xyz <= self.max_corner)).all(axis=1)

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.min_corner + self.max_corner)

    @property
    def extent(self) -> np.ndarray:
        return self.max_corner - self.min_corner


def crop_aabb(cloud: PointCloud, box: Aabb) -> PointCloud:
    return cloud.subset(np.flatnonzero(box.contains(cloud.xyz)))


# ============================================================================
#  RIGID TRANSFORMS
# ============================================================================

@dataclass(frozen=True, eq=False)
class RigidTransform:
    """SE(3) element: p -> rotation @ p + translation."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        r = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        if not (np.isfinite(r).all() and np.isfinite(t).all()):
            raise ValueError("transform entries must be finite")
        if np.abs(r.T @ r - np.eye(3)).max() > ORTHO_TOL or abs(np.linalg.det(r) - 1.0) > ORTHO_TOL:
            raise ValueError("rotation is not a proper orthonormal matrix")
        r.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, 'rotation', r)
        object.__setattr__(self, 'translation', t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls()

    @classmethod
    def from_translation(cls, t) -> "RigidTransform":
        return cls(np.eye(3), t)

    @classmethod
    def from_matrix(cls, m) -> "RigidTransform":
        m = np.asarray(m, dtype=np.float64)
        if m.shape != (4, 4):
            raise ValueError(f"expected a 4x4 matrix, got {m.shape}")
        return cls(m[:3, :3], m[:3, 3])

    def to_matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def apply(self, xyz: np.ndarray) -> np.ndarray:
        return np.asarray(xyz, dtype=np.float64) @ self.rotation.T + self.translation

    def rotate(self, vectors: np.ndarray) -> np.ndarray:
        return np.asarray(vectors, dtype=np.float64) @ self.rotation.T

    def rotation_angle_deg(self) -> float:
        c = np.clip((np.trace(self.rotation) - 1.0) / 2.0, -1.0, 1.0)
        return float(np.degrees(np.arccos(c)))

    def is_identity(self) -> bool:
        return bool(np.array_equal(self.rotation, np.eye(3)) and not self.translation.any())


def orthonormalize(r: np.ndarray) -> np.ndarray:
    """Nearest proper rotation to r (SVD projection)."""
    u, _, vt = np.linalg.svd(r)
    d = np.sign(np.linalg.det(u @ vt)) or 1.0
    return u @ np.diag([1.0, 1.0, d]) @ vt


def apply_transform(cloud: PointCloud, t: RigidTransform) -> PointCloud:
    if t.is_identity():
        return cloud
    normals = None if cloud.normals is None else t.rotate(cloud.normals)
    return replace(cloud, xyz=t.apply(cloud.xyz), normals=normals)


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """Apply b first, then a."""
    return RigidTransform(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def invert(t: RigidTransform) -> RigidTransform:
    rt = t.rotation.T
    return RigidTransform(rt, -rt @ t.translation)


def axis_rotation(axis: str, angle_deg: float) -> np.ndarray:
    a = np.radians(angle_deg)
    c, s = np.cos(a), np.sin(a)
    if axis == 'x':
        return np.array([[1, 0, 0], [0, c, -s], [0, s, c]])
    if axis == 'y':
        return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])
    if axis == 'z':
        return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])
    raise ValueError(f"unknown axis {axis!r}")


def euler_to_rotation(rx: float, ry: float, rz: float) -> np.ndarray:
    """Extrinsic X-Y-Z angles in degrees: R = Rz @ Ry @ Rx."""
    return axis_rotation('z', rz) @ axis_rotation('y', ry) @ axis_rotation('x', rx)


def euler_to_rotation_batch(angles_deg: np.ndarray) -> np.ndarray:
    """(N, 3) extrinsic X-Y-Z angles in degrees -> (N, 3, 3) rotations."""
    a = np.radians(np.asarray(angles_deg, dtype=np.float64).reshape(-1, 3))
    cx, cy, cz = np.cos(a).T
    sx, sy, sz = np.sin(a).T
    r = np.empty((len(a), 3, 3))
    r[:, 0, 0] = cz * cy
    r[:, 0, 1] = cz * sy * sx - sz * cx
    r[:, 0, 2] = cz * sy * cx + sz * sx
    r[:, 1, 0] = sz * cy
    r[:, 1, 1] = sz * sy * sx + cz * cx
    r[:, 1, 2] = sz * sy * cx - cz * sx
    r[:, 2, 0] = -sy
    r[:, 2, 1] = cy * sx
    r[:, 2, 2] = cy * cx
    return r


class EulerAngles(NamedTuple):
    rx: float
    ry: float
    rz: float
    near_gimbal_lock: bool = False


def rotation_to_euler(t: RigidTransform) -> EulerAngles:
    """Decompose into extrinsic X-Y-Z angles (degrees), ry in [-90, 90]."""
    r = t.rotation
    sy = float(np.clip(-r[2, 0], -1.0, 1.0))
    ry = np.degrees(np.arcsin(sy))
    cy = np.hypot(r[0, 0], r[1, 0])
    if cy > 1e-12:
        rx = np.degrees(np.arctan2(r[2, 1], r[2, 2]))
        rz = np.degrees(np.arctan2(r[1, 0], r[0, 0]))
    else:
        # only rz - rx (or rz + rx) is observable; put it all in rz
        rx = 0.0
        rz = np.degrees(np.arctan2(-r[0, 1], r[1, 1]))
    near = abs(ry) > GIMBAL_LIMIT_DEG
    if near:
        logger.warning("euler decomposition near gimbal lock: ry=%.4f deg", ry)
    return EulerAngles(float(rx), float(ry), float(rz), near)


def transform_from_euler(rx: float, ry: float, rz: float, translation=(0.0, 0.0, 0.0)) -> RigidTransform:
    return RigidTransform(euler_to_rotation(rx, ry, rz), translation)


def rotation_about(r: np.ndarray, pivot: np.ndarray, translation=None) -> RigidTransform:
    """Rotate about pivot, then translate: p -> r (p - pivot) + pivot + translation."""
    pivot = np.asarray(pivot, dtype=np.float64)
    t = pivot - r @ pivot
    if translation is not None:
        t = t + np.asarray(translation, dtype=np.float64)
    return RigidTransform(r, t)


def rodrigues(omega: np.ndarray) -> np.ndarray:
    """Rotation matrix of a rotation vector (axis * angle, radians)."""
    omega = np.asarray(omega, dtype=np.float64)
    theta = float(np.linalg.norm(omega))
    if theta == 0.0:
        return np.eye(3)
    k = np.array([[0, -omega[2], omega[1]], [omega[2], 0, -omega[0]], [-omega[1], omega[0], 0]])
    if theta < 1e-12:
        return orthonormalize(np.eye(3) + k)
    k = k / theta
    return np.eye(3) + np.sin(theta) * k + (1 - np.cos(theta)) * (k @ k)


# ============================================================================
#  NEIGHBOR QUERIES
# ============================================================================

class SpatialIndex:
    """k-NN and radius queries over a fixed set of positions."""

    def __init__(self, xyz: np.ndarray):
        self.xyz = np.ascontiguousarray(xyz, dtype=np.float64).reshape(-1, 3)
        self._tree = cKDTree(self.xyz) if len(self.xyz) else None

    @classmethod
    def of(cls, cloud: PointCloud) -> "SpatialIndex":
        return cls(cloud.xyz)

    def __len__(self) -> int:
        return len(self.xyz)

    def knn(self, query: np.ndarray, k: int, max_distance: float = np.inf) -> Tuple[np.ndarray, np.ndarray]:
        """Distances and indices of the k nearest points, closest first.

        k is clamped to the number of indexed points. With max_distance,
        misses carry distance inf and index len(self).
        """
        query = np.asarray(query, dtype=np.float64).reshape(-1, 3)
        k = min(int(k), len(self))
        if k <= 0 or len(query) == 0:
            return np.zeros((len(query), 0)), np.zeros((len(query), 0), dtype=np.intp)
        dist, idx = self._tree.query(query, k=k, distance_upper_bound=max_distance)
        if k == 1:
            dist, idx = dist[:, None], idx[:, None]
        return dist, idx.astype(np.intp)

    def nearest(self, query: np.ndarray, max_distance: float = np.inf) -> Tuple[np.ndarray, np.ndarray]:
        dist, idx = self.knn(query, 1, max_distance)
        return dist[:, 0], idx[:, 0]

    def radius(self, query: np.ndarray, r: float) -> List[List[int]]:
        query = np.asarray(query, dtype=np.float64).reshape(-1, 3)
        if len(self) == 0:
            return [[] for _ in range(len(query))]
        return [sorted(hits) for hits in self._tree.query_ball_point(query, r)]

    def radius_count(self, query: np.ndarray, r: float) -> np.ndarray:
        query = np.asarray(query, dtype=np.float64).reshape(-1, 3)
        if len(self) == 0:
            return np.zeros(len(query), dtype=np.intp)
        return np.asarray(self._tree.query_ball_point(query, r, return_length=True), dtype=np.intp)


def brute_force_knn(xyz: np.ndarray, query: np.ndarray, k: int) -> Tuple[np.ndarray, np.ndarray]:
    """Exhaustive k-NN, the reference for SpatialIndex."""
    d = np.linalg.norm(query[:, None, :] - xyz[None, :, :], axis=2)
    idx = np.argsort(d, axis=1, kind='stable')[:, :k]
    return np.take_along_axis(d, idx, axis=1), idx


def neighborhood_covariances(xyz: np.ndarray, neighbors: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Mean and covariance of fixed-size neighborhoods.

    neighbors is an (N, k) index array into xyz. Returns (N, 3) means and
    (N, 3, 3) covariances normalized by k.
    """
    pts = xyz[neighbors]
    mean = pts.mean(axis=1)
    centered = pts - mean[:, None, :]
    cov = np.einsum('nki,nkj->nij', centered, centered) / neighbors.shape[1]
    return mean, cov


def ragged_covariances(xyz: np.ndarray, neighbor_lists: Sequence[Sequence[int]]) -> Tuple[np.ndarray, np.ndarray]:
    """Counts and covariances of variable-size (radius) neighborhoods."""
    counts = np.fromiter((len(h) for h in neighbor_lists), dtype=np.intp, count=len(neighbor_lists))
    cov = np.zeros((len(counts), 3, 3))
    nonempty = counts > 0
    if not nonempty.any():
        return counts, cov
    flat = np.fromiter((i for h in neighbor_lists for i in h), dtype=np.intp, count=int(counts.sum()))
    starts = np.concatenate(([0], np.cumsum(counts)[:-1]))[nonempty]
    pts = xyz[flat]
    # raw second moments lose precision at map coordinates
    pts = pts - pts.mean(axis=0)
    c = counts[nonempty][:, None].astype(np.float64)
    mean = np.add.reduceat(pts, starts, axis=0) / c
    outer = np.add.reduceat(np.einsum('ni,nj->nij', pts, pts).reshape(-1, 9), starts, axis=0) / c
    cov[nonempty] = outer.reshape(-1, 3, 3) - np.einsum('ni,nj->nij', mean, mean)
    return counts, cov


# ============================================================================
#  NORMALS
# ============================================================================

NORMAL_CHUNK = 200_000
DEGENERATE_RATIO = 1e-10


def compute_normals(index: SpatialIndex, query: np.ndarray, k: int) -> Tuple[np.ndarray, np.ndarray]:
    """PCA normals at query positions from their k nearest indexed points.

    Returns (normals, valid). A neighborhood whose covariance has rank < 2
    yields an invalid normal (set to +z so downstream math stays finite).
    """
    if k < 3:
        raise ValueError(f"normal estimation needs k >= 3, got {k}")
    if len(index) < 3:
        raise DegenerateGeometryError(f"normal estimation needs at least 3 points, got {len(index)}")
    query = np.asarray(query, dtype=np.float64).reshape(-1, 3)
    k_eff = min(k + 1, len(index))
    normals = np.empty((len(query), 3))
    valid = np.empty(len(query), dtype=bool)
    for start in range(0, len(query), NORMAL_CHUNK):
        block = query[start:start + NORMAL_CHUNK]
        _, nbrs = index.knn(block, k_eff)
        _, cov = neighborhood_covariances(index.xyz, nbrs)
        evals, evecs = np.linalg.eigh(cov)
        normals[start:start + len(block)] = evecs[:, :, 0]
        largest = np.maximum(evals[:, 2], 0.0)
        valid[start:start + len(block)] = evals[:, 1] > DEGENERATE_RATIO * largest + 1e-300
    normals[~valid] = (0.0, 0.0, 1.0)
    return normals, valid


def estimate_normals(cloud: PointCloud, k: int = 10) -> PointCloud:
    """Unoriented PCA normals from the k nearest neighbors of every point."""
    if len(cloud) < k + 1:
        logger.warning("%s: %d points for k=%d, using all points as neighborhood", cloud.name, len(cloud), k)
    normals, valid = compute_normals(SpatialIndex.of(cloud), cloud.xyz, k)
    if not valid.all():
        logger.debug("%s: %d degenerate normals flagged", cloud.name, int((~valid).sum()))
    return cloud.with_normals(normals, valid)


def orient_normals_towards(cloud: PointCloud, viewpoint) -> PointCloud:
    """Flip normals so that dot(n, viewpoint - p) >= 0."""
    if cloud.normals is None:
        raise MissingAttributeError(f"{cloud.name}: orient_normals_towards needs normals")
    to_view = np.asarray(viewpoint, dtype=np.float64) - cloud.xyz
    flip = np.einsum('ij,ij->i', cloud.normals, to_view) < 0
    normals = np.where(flip[:, None], -cloud.normals, cloud.normals)
    return cloud.with_normals(normals, cloud.normal_valid)


# ============================================================================
#  CLOSED-FORM RIGID FIT
# ============================================================================

def kabsch_fit(source: np.ndarray, target: np.ndarray, weights: Optional[np.ndarray] = None) -> RigidTransform:
    """Weighted least-squares rigid transform mapping source onto target."""
    src = np.asarray(source, dtype=np.float64).reshape(-1, 3)
    tgt = np.asarray(target, dtype=np.float64).reshape(-1, 3)
    if src.shape != tgt.shape:
        raise ValueError(f"source {src.shape} and target {tgt.shape} differ in shape")
    if len(src) < 3:
        raise DegenerateGeometryError(f"kabsch_fit needs at least 3 pairs, got {len(src)}")
    if weights is None:
        w = np.full(len(src), 1.0 / len(src))
    else:
        w = np.asarray(weights, dtype=np.float64).reshape(-1)
        if w.shape != (len(src),) or (w < 0).any() or not w.sum() > 0:
            raise ValueError("weights must be nonnegative, one per pair, with a positive sum")
        w = w / w.sum()
    cs = w @ src
    ct = w @ tgt
    a = src - cs
    b = tgt - ct
    spread = np.linalg.svd(a * np.sqrt(w)[:, None], compute_uv=False)
    if spread[1] <= 1e-12 * max(spread[0], 1e-300):
        raise DegenerateGeometryError("kabsch_fit: source points are collinear or coincident")
    h = (a * w[:, None]).T @ b
    u, _, vt = np.linalg.svd(h)
    d = 1.0 if np.linalg.det(vt.T @ u.T) >= 0 else -1.0
    r = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    return RigidTransform(r, ct - r @ cs)


def kabsch_batch(src: np.ndarray, tgt: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Unweighted Kabsch over a batch of equally sized samples.

    src, tgt: (B, m, 3). Returns rotations (B, 3, 3), translations (B, 3)
    and a mask of non-degenerate samples.
    """
    cs = src.mean(axis=1)
    ct = tgt.mean(axis=1)
    a = src - cs[:, None, :]
    b = tgt - ct[:, None, :]
    spread = np.linalg.svd(a, compute_uv=False)
    ok = spread[:, 1] > 1e-9 * np.maximum(spread[:, 0], 1e-300)
    h = np.einsum('bki,bkj->bij', a, b)
    u, _, vt = np.linalg.svd(h)
    v = np.transpose(vt, (0, 2, 1))
    ut = np.transpose(u, (0, 2, 1))
    d = np.sign(np.linalg.det(v @ ut))
    d[d == 0] = 1.0
    fix = np.tile(np.eye(3), (len(src), 1, 1))
    fix[:, 2, 2] = d
    r = v @ fix @ ut
    t = ct - np.einsum('bij,bj->bi', r, cs)
    return r, t, ok
