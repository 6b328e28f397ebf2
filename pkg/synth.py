#!/usr/bin/env python3
"""
MLSREG-KIT Synth
Deterministic street scenes with ground-truth planes and labels, drift
profiles over trajectory arclength, and random rigid perturbations.

Random numbers come from numpy's PCG64 generator; every scene element
draws from its own stream spawned from SeedSequence(seed), so output is
bit-identical for a given seed.
"""
import logging
from dataclasses import dataclass, field
from typing import List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from cloud_io import Trajectory
from core import (
    PointCloud, RigidTransform, apply_transform, euler_to_rotation_batch, rodrigues, rotation_about,
)

logger = logging.getLogger(__name__)

# ASPRS codes
LABEL_UNCLASSIFIED = 1
LABEL_GROUND = 2
LABEL_VEGETATION = 5
LABEL_BUILDING = 6
LABEL_DYNAMIC = 64

CLUTTER_POINTS_PER_OBJECT = 400
DRIFT_KINDS = ('none', 'rigid', 'linear', 'rise_fall_rise', 'constant')


@dataclass
class SceneSpec:
    street_length_m: float = field(default=100.0, metadata={"range": (1.0, 100_000.0)})
    facade_offset_m: float = field(default=8.0, metadata={"range": (0.5, 1000.0)})
    building_length_m: float = field(default=20.0, metadata={"range": (0.5, 10_000.0)})
    building_depth_m: float = field(default=10.0, metadata={"range": (0.1, 1000.0)})
    building_height_m: float = field(default=12.0, metadata={"range": (0.1, 1000.0)})
    side_street_m: float = field(default=8.0, metadata={"range": (0.0, 1000.0)})
    # flattened (start, end) x intervals without buildings on either side
    facade_gaps: Tuple[float, ...] = field(default=(), metadata={"range": (0.0, 100_000.0)})
    spacing_m: float = field(default=0.2, metadata={"range": (0.005, 10.0)})
    noise_m: float = field(default=0.005, metadata={"range": (0.0, 1.0)})
    clutter_fraction: float = field(default=0.2, metadata={"range": (0.0, 0.99)})
    dynamic_fraction: float = field(default=0.0, metadata={"range": (0.0, 0.99)})
    speed_mps: float = field(default=5.0, metadata={"range": (0.01, 100.0)})
    scan_rate_hz: float = field(default=10.0, metadata={"range": (0.1, 1000.0)})
    sensor_height_m: float = field(default=2.0, metadata={"range": (0.0, 100.0)})
    start_time_s: float = field(default=0.0, metadata={"range": (0.0, 1e10)})
    seed: int = field(default=0, metadata={"range": (0, 2**63 - 1)})
    drift_kind: str = field(default='rigid', metadata={"choices": DRIFT_KINDS})
    drift_peak_tx_m: float = field(default=0.007, metadata={"range": (-100.0, 100.0)})
    perturb_max_angle_deg: float = field(default=10.0, metadata={"range": (0.0, 180.0)})
    perturb_max_translation_m: float = field(default=2.0, metadata={"range": (0.0, 1000.0)})

    def gaps(self) -> List[Tuple[float, float]]:
        if len(self.facade_gaps) % 2:
            raise ValueError("synth.facade_gaps needs (start, end) pairs")
        pairs = [(float(a), float(b)) for a, b in zip(self.facade_gaps[::2], self.facade_gaps[1::2])]
        for a, b in pairs:
            if not 0 <= a < b <= self.street_length_m:
                raise ValueError(f"facade gap ({a}, {b}) outside the street [0, {self.street_length_m}]")
        return sorted(pairs)


class Rectangle(NamedTuple):
    origin: np.ndarray
    u: np.ndarray
    v: np.ndarray
    label: int

    @property
    def normal(self) -> np.ndarray:
        n = np.cross(self.u, self.v)
        return n / np.linalg.norm(n)

    @property
    def area(self) -> float:
        return float(np.linalg.norm(np.cross(self.u, self.v)))


class SyntheticScene(NamedTuple):
    cloud: PointCloud
    trajectory: Trajectory
    plane_ids: np.ndarray
    planes: List[Rectangle]


# ============================================================================
#  SCENE LAYOUT
# ============================================================================

def _subtract(span: Tuple[float, float], gaps: Sequence[Tuple[float, float]]) -> List[Tuple[float, float]]:
    pieces = [span]
    for ga, gb in gaps:
        nxt = []
        for a, b in pieces:
            if gb <= a or ga >= b:
                nxt.append((a, b))
                continue
            if ga > a:
                nxt.append((a, ga))
            if gb < b:
                nxt.append((gb, b))
        pieces = nxt
    return [(a, b) for a, b in pieces if b - a > 1e-9]


def building_spans(spec: SceneSpec) -> List[Tuple[float, float]]:
    """x extents of building blocks, separated by side streets and gaps."""
    spans = []
    pitch = spec.building_length_m + spec.side_street_m
    x = 0.0
    while x < spec.street_length_m:
        spans.extend(_subtract((x, min(x + spec.building_length_m, spec.street_length_m)), spec.gaps()))
        x += pitch
    return spans


def scene_planes(spec: SceneSpec) -> List[Rectangle]:
    """Road, then per block the street façade and both end walls on each side."""
    length, w, d, h = spec.street_length_m, spec.facade_offset_m, spec.building_depth_m, spec.building_height_m
    planes = [Rectangle(np.array([0.0, -w, 0.0]), np.array([length, 0.0, 0.0]),
                        np.array([0.0, 2 * w, 0.0]), LABEL_GROUND)]
    z = np.array([0.0, 0.0, h])
    for a, b in building_spans(spec):
        for side in (1.0, -1.0):
            y = side * w
            # u x v points towards the street
            if side > 0:
                planes.append(Rectangle(np.array([a, y, 0.0]), np.array([b - a, 0.0, 0.0]), z, LABEL_BUILDING))
            else:
                planes.append(Rectangle(np.array([a, y, 0.0]), z, np.array([b - a, 0.0, 0.0]), LABEL_BUILDING))
            depth = np.array([0.0, side * d, 0.0])
            start_wall, end_wall = (z, depth), (depth, z)
            if side < 0:
                start_wall, end_wall = end_wall, start_wall
            planes.append(Rectangle(np.array([a, y, 0.0]), *start_wall, LABEL_BUILDING))
            planes.append(Rectangle(np.array([b, y, 0.0]), *end_wall, LABEL_BUILDING))
    return planes


def _sample_rectangle(rect: Rectangle, spacing: float, noise: float, rng: np.random.Generator) -> np.ndarray:
    n = max(int(round(rect.area / spacing ** 2)), 1)
    uv = rng.random((n, 2))
    pts = rect.origin + uv[:, :1] * rect.u + uv[:, 1:] * rect.v
    if noise > 0:
        pts = pts + rng.normal(0.0, noise, (n, 1)) * rect.normal
    return pts


def _sample_clutter(spec: SceneSpec, count: int, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """Spheres (vegetation) and poles (unclassified) along the sidewalks."""
    objects = max(int(np.ceil(count / CLUTTER_POINTS_PER_OBJECT)), 1) if count else 0
    pts, labels = [], []
    remaining = count
    for _ in range(objects):
        n = min(CLUTTER_POINTS_PER_OBJECT, remaining)
        remaining -= n
        x = rng.uniform(0.0, spec.street_length_m)
        y = rng.choice([-1.0, 1.0]) * rng.uniform(2.0, max(spec.facade_offset_m - 1.5, 2.5))
        if rng.random() < 0.5:
            r = rng.uniform(0.5, 1.5)
            d = rng.normal(size=(n, 3))
            d /= np.linalg.norm(d, axis=1, keepdims=True)
            center = np.array([x, y, 2.5 + r])
            pts.append(center + d * (r + rng.normal(0.0, spec.noise_m, (n, 1))))
            labels.append(np.full(n, LABEL_VEGETATION))
        else:
            r, height = 0.1, rng.uniform(4.0, 6.0)
            phi = rng.uniform(0.0, 2 * np.pi, n)
            radial = r + rng.normal(0.0, spec.noise_m, n)
            pts.append(np.column_stack([x + radial * np.cos(phi), y + radial * np.sin(phi),
                                        rng.uniform(0.0, height, n)]))
            labels.append(np.full(n, LABEL_UNCLASSIFIED))
    if not pts:
        return np.zeros((0, 3)), np.zeros(0, dtype=np.int64)
    return np.vstack(pts), np.concatenate(labels)


def _sample_dynamic(spec: SceneSpec, count: int, rng: np.random.Generator) -> np.ndarray:
    """Car-sized boxes on the road."""
    size = np.array([4.0, 1.8, 1.5])
    out = []
    remaining = count
    while remaining > 0:
        n = min(CLUTTER_POINTS_PER_OBJECT, remaining)
        remaining -= n
        corner = np.array([rng.uniform(0.0, max(spec.street_length_m - size[0], 0.0)),
                           rng.uniform(-spec.facade_offset_m + 1.0, spec.facade_offset_m - 1.0 - size[1]), 0.0])
        local = rng.random((n, 3)) * size
        face = rng.integers(0, 5, n)
        axis = np.where(face < 2, 0, np.where(face < 4, 1, 2))
        local[np.arange(n), axis] = np.where(face % 2 == 0, 0.0, size[axis])
        local[face == 4, 2] = size[2]
        out.append(corner + local)
    return np.vstack(out) if out else np.zeros((0, 3))


def make_trajectory(spec: SceneSpec) -> Trajectory:
    duration = spec.street_length_m / spec.speed_mps
    n = int(np.floor(duration * spec.scan_rate_hz + 1e-9)) + 1
    t = np.arange(n) / spec.scan_rate_hz
    if t[-1] < duration - 1e-9:
        t = np.append(t, duration)
    pos = np.column_stack([t * spec.speed_mps, np.zeros_like(t), np.full_like(t, spec.sensor_height_m)])
    return Trajectory(t + spec.start_time_s, pos)


def generate_scene(spec: Optional[SceneSpec] = None) -> SyntheticScene:
    """Sample the scene; points acquired when the platform passes their x position.

    plane_ids index into planes; clutter and dynamic points carry -1.
    """
    spec = spec or SceneSpec()
    if spec.facade_offset_m < 1.0 and spec.clutter_fraction > 0:
        raise ValueError("synth: clutter needs facade_offset_m >= 1 for the sidewalks")
    if spec.clutter_fraction + spec.dynamic_fraction >= 1.0:
        raise ValueError("synth: clutter_fraction + dynamic_fraction must be < 1")
    planes = scene_planes(spec)
    streams = np.random.SeedSequence(spec.seed).spawn(3)
    plane_streams = streams[0].spawn(len(planes))

    chunks, labels, ids = [], [], []
    for i, (rect, ss) in enumerate(zip(planes, plane_streams)):
        pts = _sample_rectangle(rect, spec.spacing_m, spec.noise_m, np.random.Generator(np.random.PCG64(ss)))
        chunks.append(pts)
        labels.append(np.full(len(pts), rect.label))
        ids.append(np.full(len(pts), i))
    n_planar = sum(len(c) for c in chunks)
    scale = n_planar / (1.0 - spec.clutter_fraction - spec.dynamic_fraction)
    n_clutter = int(round(scale * spec.clutter_fraction))
    n_dynamic = int(round(scale * spec.dynamic_fraction))

    clutter, clutter_labels = _sample_clutter(spec, n_clutter, np.random.Generator(np.random.PCG64(streams[1])))
    dynamic = _sample_dynamic(spec, n_dynamic, np.random.Generator(np.random.PCG64(streams[2])))
    chunks += [clutter, dynamic]
    labels += [clutter_labels, np.full(len(dynamic), LABEL_DYNAMIC)]
    ids += [np.full(len(clutter), -1), np.full(len(dynamic), -1)]

    xyz = np.vstack(chunks)
    gps_time = spec.start_time_s + np.clip(xyz[:, 0], 0.0, spec.street_length_m) / spec.speed_mps
    order = np.argsort(gps_time, kind='stable')
    cloud = PointCloud(xyz[order], gps_time=gps_time[order],
                       labels=np.concatenate(labels)[order], name='target')
    logger.info("synth seed=%d: %d planar, %d clutter, %d dynamic points on %d planes",
                spec.seed, n_planar, len(clutter), len(dynamic), len(planes))
    return SyntheticScene(cloud, make_trajectory(spec), np.concatenate(ids)[order], planes)


# ============================================================================
#  DRIFT
# ============================================================================

@dataclass(frozen=True, eq=False)
class DriftProfile:
    """Piecewise-linear (rx, ry, rz) degrees and (tx, ty, tz) meters over arclength."""

    knots: np.ndarray
    values: np.ndarray
    allow_offset: bool = False

    def __post_init__(self):
        knots = np.asarray(self.knots, dtype=np.float64).reshape(-1)
        values = np.asarray(self.values, dtype=np.float64).reshape(-1, 6)
        if len(knots) < 2 or len(knots) != len(values):
            raise ValueError("drift profile needs >= 2 knots with one 6-vector each")
        if knots[0] != 0.0 or not (np.diff(knots) > 0).all():
            raise ValueError("drift profile knots must start at 0 and increase")
        if not self.allow_offset and np.any(values[0] != 0.0):
            raise ValueError("drift profile must be zero at arclength 0")
        object.__setattr__(self, 'knots', knots)
        object.__setattr__(self, 'values', values)

    @property
    def length(self) -> float:
        return float(self.knots[-1])

    @classmethod
    def zero(cls, length_m: float) -> "DriftProfile":
        return cls(np.array([0.0, length_m]), np.zeros((2, 6)))

    @classmethod
    def linear(cls, length_m: float, end_values: Sequence[float]) -> "DriftProfile":
        return cls(np.array([0.0, length_m]), np.vstack([np.zeros(6), np.asarray(end_values, dtype=np.float64)]))

    @classmethod
    def rise_fall_rise(cls, length_m: float, peak_tx_m: float = 0.007) -> "DriftProfile":
        """tx rises to its peak at mid-length, falls back, then rises again."""
        knots = np.array([0.0, 0.5, 0.75, 1.0]) * length_m
        values = np.zeros((4, 6))
        values[:, 3] = np.array([0.0, 1.0, 0.3, 0.8]) * peak_tx_m
        return cls(knots, values)

    @classmethod
    def constant(cls, length_m: float, values: Sequence[float]) -> "DriftProfile":
        row = np.asarray(values, dtype=np.float64).reshape(6)
        return cls(np.array([0.0, length_m]), np.vstack([row, row]), allow_offset=True)

    def at(self, s) -> np.ndarray:
        s = np.atleast_1d(np.asarray(s, dtype=np.float64))
        return np.column_stack([np.interp(s, self.knots, self.values[:, c]) for c in range(6)])

    def transform_at(self, s: float) -> RigidTransform:
        v = self.at(s)[0]
        return RigidTransform(euler_to_rotation_batch(v[:3])[0], v[3:])


def apply_drift(target: PointCloud, trajectory: Trajectory, profile: DriftProfile) -> PointCloud:
    """Move every point by the profile evaluated at the arclength of its acquisition time."""
    if profile.length < trajectory.total_length - 1e-9:
        raise ValueError(f"drift profile covers {profile.length:.3f} m, trajectory is "
                         f"{trajectory.total_length:.3f} m")
    times = target.require_time('apply_drift')
    values = profile.at(trajectory.arclength_at(times))
    r = euler_to_rotation_batch(values[:, :3])
    xyz = np.einsum('nij,nj->ni', r, target.xyz) + values[:, 3:]
    normals = None if target.normals is None else np.einsum('nij,nj->ni', r, target.normals)
    return PointCloud(xyz, gps_time=target.gps_time, labels=target.labels, intensity=target.intensity,
                      normals=normals, normal_valid=target.normal_valid, colors=target.colors, name='source')


def random_perturbation(rng: np.random.Generator, max_angle_deg: float = 10.0, max_translation_m: float = 2.0,
                        pivot: Optional[np.ndarray] = None) -> RigidTransform:
    """Uniform random axis and direction; angle and translation magnitude uniform up to the bounds."""
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = np.radians(rng.uniform(0.0, max_angle_deg))
    direction = rng.normal(size=3)
    direction /= np.linalg.norm(direction)
    translation = direction * rng.uniform(0.0, max_translation_m)
    r = rodrigues(axis * angle)
    if pivot is None:
        return RigidTransform(r, translation)
    return rotation_about(r, pivot, translation)


def scene_drift_profile(spec: SceneSpec, length_m: float) -> Optional[DriftProfile]:
    """Profile for the non-rigid drift kinds; None for 'none' and 'rigid'."""
    if spec.drift_kind == 'linear':
        return DriftProfile.linear(length_m, [0, 0, 0, spec.drift_peak_tx_m, 0, 0])
    if spec.drift_kind == 'rise_fall_rise':
        return DriftProfile.rise_fall_rise(length_m, spec.drift_peak_tx_m)
    if spec.drift_kind == 'constant':
        return DriftProfile.constant(length_m, [0, 0, 0, spec.drift_peak_tx_m, 0, 0])
    return None


def make_source(scene: SyntheticScene, spec: SceneSpec) -> Tuple[PointCloud, Optional[RigidTransform]]:
    """Source cloud for spec.drift_kind; returns the rigid perturbation when one was applied."""
    if spec.drift_kind == 'none':
        return scene.cloud.renamed('source'), None
    if spec.drift_kind == 'rigid':
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([spec.seed, 1])))
        truth = random_perturbation(rng, spec.perturb_max_angle_deg, spec.perturb_max_translation_m,
                                    pivot=scene.cloud.xyz.mean(axis=0))
        return apply_transform(scene.cloud, truth).renamed('source'), truth
    profile = scene_drift_profile(spec, scene.trajectory.total_length)
    return apply_drift(scene.cloud, scene.trajectory, profile), None
