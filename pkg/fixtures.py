#!/usr/bin/env python3
"""
MLSREG-KIT Test Fixtures
Small constructed scenes with known geometry, shared by the test files.
"""
import os
from typing import Optional, Tuple

import numpy as np

from cloud_io import Trajectory
from core import PointCloud, RigidTransform, rodrigues
from synth import SceneSpec

SLOW = os.environ.get('MLSREG_SLOW', '') not in ('', '0')


def rng(seed: int = 0) -> np.random.Generator:
    return np.random.default_rng(seed)


def grid_plane(axis: int, offset: float, extent=(0.0, 1.0), spacing: float = 0.05,
               other_extent=None) -> np.ndarray:
    """Regular grid on the plane coordinate[axis] = offset."""
    lo, hi = extent
    a = np.arange(lo, hi + 1e-9, spacing)
    b = a if other_extent is None else np.arange(other_extent[0], other_extent[1] + 1e-9, spacing)
    u, v = np.meshgrid(a, b, indexing='ij')
    cols = [u.ravel(), v.ravel()]
    cols.insert(axis, np.full(u.size, offset))
    return np.column_stack(cols)


def random_plane(n: int, axis: int = 2, offset: float = 0.0, size: float = 1.0,
                 noise: float = 0.0, seed: int = 0) -> np.ndarray:
    g = rng(seed)
    uv = g.uniform(-size / 2, size / 2, (n, 2))
    cols = [uv[:, 0], uv[:, 1]]
    cols.insert(axis, offset + (g.normal(0.0, noise, n) if noise > 0 else np.zeros(n)))
    return np.column_stack(cols)


def three_planes(spacing: float = 0.1, size: float = 2.0) -> PointCloud:
    """Floor and two walls meeting at the origin, noiseless."""
    xyz = np.vstack([
        grid_plane(2, 0.0, (0.0, size), spacing),
        grid_plane(0, 0.0, (0.0, size), spacing)[1:],
        grid_plane(1, 0.0, (0.0, size), spacing)[1:],
    ])
    xyz = np.unique(np.round(xyz, 9), axis=0)
    return PointCloud(xyz, name='three-planes')


def box_surface(size=(2.0, 2.0, 2.0), spacing: float = 0.05, origin=(0.0, 0.0, 0.0)) -> PointCloud:
    """All six faces of an axis-aligned box."""
    sx, sy, sz = size
    faces = [
        grid_plane(2, 0.0, (0.0, sx), spacing, (0.0, sy)), grid_plane(2, sz, (0.0, sx), spacing, (0.0, sy)),
        grid_plane(1, 0.0, (0.0, sx), spacing, (0.0, sz)), grid_plane(1, sy, (0.0, sx), spacing, (0.0, sz)),
        grid_plane(0, 0.0, (0.0, sy), spacing, (0.0, sz)), grid_plane(0, sx, (0.0, sy), spacing, (0.0, sz)),
    ]
    xyz = np.unique(np.round(np.vstack(faces), 9), axis=0) + np.asarray(origin, dtype=np.float64)
    return PointCloud(xyz, name='box')


def box_interior(size=(12.0, 8.0, 4.0), spacing: float = 0.2, noise: float = 0.0,
                 t0: float = 0.0, t1: float = 10.0, seed: int = 0) -> PointCloud:
    """Floor and four walls of a room, seen from inside; gps_time grows with x."""
    sx, sy, sz = size
    faces = [
        grid_plane(2, 0.0, (0.0, sx), spacing, (0.0, sy)),
        grid_plane(1, 0.0, (0.0, sx), spacing, (0.0, sz)), grid_plane(1, sy, (0.0, sx), spacing, (0.0, sz)),
        grid_plane(0, 0.0, (0.0, sy), spacing, (0.0, sz)), grid_plane(0, sx, (0.0, sy), spacing, (0.0, sz)),
    ]
    xyz = np.unique(np.round(np.vstack(faces), 9), axis=0)
    if noise > 0:
        xyz = xyz + rng(seed).normal(0.0, noise, xyz.shape)
    times = t0 + (t1 - t0) * (xyz[:, 0] - xyz[:, 0].min()) / max(np.ptp(xyz[:, 0]), 1e-12)
    order = np.argsort(times, kind='stable')
    return PointCloud(xyz[order], gps_time=times[order], name='room')


def ground_only(extent: float = 12.0, spacing: float = 0.2, t0: float = 0.0, t1: float = 10.0) -> PointCloud:
    xyz = grid_plane(2, 0.0, (0.0, extent), spacing)
    times = t0 + (t1 - t0) * xyz[:, 0] / extent
    order = np.argsort(times, kind='stable')
    return PointCloud(xyz[order], gps_time=times[order], name='ground')


def straight_trajectory(duration_s: float, speed_mps: float = 5.0, rate_hz: float = 10.0,
                        start: float = 0.0, height: float = 2.0) -> Trajectory:
    t = np.arange(int(round(duration_s * rate_hz)) + 1) / rate_hz + start
    pos = np.column_stack([(t - start) * speed_mps, np.zeros_like(t), np.full_like(t, height)])
    return Trajectory(t, pos)


def random_transform(seed: int = 0, max_angle_deg: float = 10.0, max_translation_m: float = 2.0) -> RigidTransform:
    g = rng(seed)
    axis = g.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = np.radians(g.uniform(-max_angle_deg, max_angle_deg))
    direction = g.normal(size=3)
    direction /= np.linalg.norm(direction)
    return RigidTransform(rodrigues(axis * angle), direction * g.uniform(0.0, max_translation_m))


def rotation_error_deg(a: RigidTransform, b: RigidTransform) -> float:
    c = np.clip((np.trace(a.rotation.T @ b.rotation) - 1.0) / 2.0, -1.0, 1.0)
    return float(np.degrees(np.arccos(c)))


def translation_error(a: RigidTransform, b: RigidTransform) -> float:
    return float(np.linalg.norm(a.translation - b.translation))


def small_street(seed: int = 0, drift_kind: str = 'rigid', length_m: float = 60.0,
                 gaps: Tuple[float, ...] = (), clutter: float = 0.2, spacing: float = 0.25,
                 peak_tx: Optional[float] = None) -> SceneSpec:
    """Reduced street for end-to-end runs."""
    spec = SceneSpec(street_length_m=length_m, spacing_m=spacing, clutter_fraction=clutter,
                     facade_gaps=gaps, seed=seed, drift_kind=drift_kind)
    if peak_tx is not None:
        spec.drift_peak_tx_m = peak_tx
    return spec


def run_tests(title: str, tests) -> bool:
    """Run each test function, print failures and the pass/fail totals."""
    print("=" * 60)
    print(title)
    print("=" * 60)

    passed = 0
    failed = 0

    for test in tests:
        try:
            if test():
                passed += 1
        except AssertionError as e:
            print(f"  FAILED: {e}")
            failed += 1
        except Exception as e:
            print(f"  ERROR: {type(e).__name__}: {e}")
            failed += 1

    print("\n" + "=" * 60)
    print(f"RESULTS: {passed} passed, {failed} failed")
    print("=" * 60)

    return failed == 0
