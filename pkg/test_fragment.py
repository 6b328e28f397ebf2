#!/usr/bin/env python3
"""
MLSREG-KIT Fragment Test Suite
Run: python3 test_fragment.py
"""

import sys
import tempfile
from pathlib import Path

import numpy as np

from cloud_io import Trajectory
from core import PointCloud, axis_rotation, estimate_normals
from fixtures import box_interior, grid_plane, ground_only, rng, run_tests, straight_trajectory
from fragment import (
    CANONICAL_SEEDS, Fragment, FragmentParams, FragmentStatus, SemiSphereProjection, align_longest_axis,
    check_trajectory_length, fragment_cloud, initial_fragmentation, kmeans_semisphere,
    orient_and_project_normals, read_fragments_json, semisphere_check, ssc_validate, write_fragments_json,
)


def line_cloud(times: np.ndarray, speed: float = 5.0) -> PointCloud:
    return PointCloud(np.column_stack([times * speed, np.zeros_like(times), np.zeros_like(times)]),
                      gps_time=times)


def ground_then_room() -> PointCloud:
    """10 s of bare road, then 10 s inside a room that starts where the road ends."""
    ground = grid_plane(2, 0.0, (0.0, 12.0), 0.2, (0.0, 8.0))
    ground_t = 9.9 * ground[:, 0] / 12.0
    order = np.argsort(ground_t, kind='stable')
    room = box_interior(t0=10.0, t1=19.9)
    return PointCloud(np.vstack([ground[order], room.xyz + [12.2, 0.0, 0.0]]),
                      gps_time=np.concatenate([ground_t[order], room.gps_time]))


def test_temporal_fragments():
    print("\n[TEST] Initial Fragments: Temporal")

    cloud = line_cloud(np.linspace(0.0, 35.0, 351))
    fragments = initial_fragmentation(cloud, None, 'temporal', interval_s=10.0)
    assert len(fragments) == 4, f"35 s at 10 s -> 4 fragments, got {len(fragments)}"
    assert [f.t_start for f in fragments] == [0.0, 10.0, 20.0, 30.0], "fragment start times"
    assert fragments[-1].t_end == 35.0, "last fragment ends at the last point"
    assert sum(f.size for f in fragments) == len(cloud), "fragments partition the cloud"
    assert all(a.stop == b.start for a, b in zip(fragments, fragments[1:])), "fragments are contiguous"

    # 5 m/s: every full 10 s fragment covers 50 m of trajectory
    traj = straight_trajectory(60.0, speed_mps=5.0)
    fragments = initial_fragmentation(line_cloud(np.arange(600) / 10.0), traj, 'temporal', interval_s=10.0)
    lengths = np.array([f.trajectory_length for f in fragments[:5]])
    assert len(fragments) == 6 and np.abs(lengths - 50.0).max() < 1e-6, f"lengths {lengths}"

    print("  35 s -> 4 spans; 5 m/s -> 50 m each ✓")
    return True


def test_spatial_fragments():
    print("\n[TEST] Initial Fragments: Spatial")

    traj = straight_trajectory(95.0, speed_mps=1.0, rate_hz=1.0)
    cloud = line_cloud(np.arange(0.0, 95.0 + 1e-9, 0.5), speed=1.0)
    fragments = initial_fragmentation(cloud, traj, 'spatial', length_m=10.0)
    assert len(fragments) == 10, f"95 m at 10 m -> 10 fragments, got {len(fragments)}"
    assert sum(f.size for f in fragments) == len(cloud), "fragments partition the cloud"

    print("  95 m -> 10 fragments ✓")
    return True


def test_trajectory_length_check():
    print("\n[TEST] Trajectory Length Check")

    frag = Fragment(0, 0, 10, 0.0, 10.0)
    still = Trajectory(np.arange(11.0), np.zeros((11, 3)))
    assert not check_trajectory_length(frag, still, 10.0) and frag.trajectory_length == 0.0, "stationary -> fail"

    straight = Trajectory(np.arange(11.0), np.column_stack([np.linspace(0, 12, 11), np.zeros(11), np.zeros(11)]))
    assert check_trajectory_length(frag, straight, 10.0), "straight 12 m -> pass"

    # five 1.9 m legs: 9.5 m of path
    leg = 1.9 / np.sqrt(2.0)
    xy = np.column_stack([np.arange(6) * leg, np.where(np.arange(6) % 2, leg, 0.0)])
    zig = Trajectory(np.arange(6.0) * 2.0, np.column_stack([xy, np.zeros(6)]))
    assert abs(zig.total_length - 9.5) < 1e-12, f"zig-zag length {zig.total_length}"
    assert not check_trajectory_length(frag, zig, 10.0), "9.5 m zig-zag -> fail"

    print("  0 m fail / 12 m pass / 9.5 m fail ✓")
    return True


def test_align_longest_axis():
    print("\n[TEST] Longest Axis Alignment")

    g = rng(31)
    s = np.linspace(-20, 20, 400)
    exact = PointCloud(np.column_stack([s, s, np.zeros_like(s)]))
    aligned, alignment = align_longest_axis(exact)
    assert abs(np.radians(alignment.angle_deg + 45.0)) < 1e-6, f"(1,1,0) diagonal rotated by {alignment.angle_deg}"
    assert np.ptp(aligned.xyz[:, 1]) < 1e-9, "aligned diagonal lies along x"

    x_line = PointCloud(np.column_stack([s, np.zeros_like(s), np.zeros_like(s)]))
    _, alignment = align_longest_axis(x_line)
    assert abs(alignment.angle_deg) < 1e-6, "x-aligned line needs no rotation"

    corridor = PointCloud(np.column_stack([s, g.uniform(-3, 3, 400), g.uniform(0, 5, 400)]))
    _, alignment = align_longest_axis(corridor)
    assert abs(alignment.angle_deg) < 5.0, f"x corridor rotated by {alignment.angle_deg}"

    for theta in g.uniform(-180.0, 180.0, 20):
        local = np.column_stack([s, 0.02 * g.normal(size=400), np.zeros(400)])
        _, alignment = align_longest_axis(PointCloud(local @ axis_rotation('z', theta).T))
        expected = (-theta + 90.0) % 180.0 - 90.0
        diff = (alignment.angle_deg - expected + 90.0) % 180.0 - 90.0
        assert abs(diff) < 0.1, f"theta={theta:.2f}: rotation {alignment.angle_deg:.3f}, expected {expected:.3f}"
        assert -90.0 < alignment.angle_deg <= 90.0, f"angle {alignment.angle_deg} outside (-90, 90]"

    _, alignment = align_longest_axis(PointCloud(np.column_stack([np.zeros(5), np.zeros(5), np.arange(5.0)])))
    assert alignment.degenerate and alignment.angle_deg == 0.0, "points coincident in XY -> identity, flagged"

    print("  diagonal / x line / corridor / 20 random directions / degenerate ✓")
    return True


def test_projection():
    print("\n[TEST] Semi-Sphere Projection")

    xyz = np.array([[-1.0, 0, 0], [1.0, 0, 0], [0, 1.0, 0], [0, -1.0, 0.0]])
    normals = np.array([[-1.0, 0, 0], [0, 0, -1.0], [0, 1.0, 0], [0, 0, -1.0]])
    d = orient_and_project_normals(PointCloud(xyz, normals=normals)).directions
    assert np.allclose(d[0], [1, 0, 0]), f"left point, normal -x -> flipped to +x, got {d[0]}"
    assert np.allclose(d[1], [0, 0, 1]), f"(0,0,-1) -> (0,0,1), got {d[1]}"
    assert np.allclose(d[2], [0, -1, 0]), f"outward +y normal flipped inward, got {d[2]}"
    assert (d[:, 2] >= 0).all(), "semi-sphere z >= 0"

    invalid = PointCloud(xyz, normals=normals, normal_valid=np.array([True, False, True, False]))
    assert len(orient_and_project_normals(invalid)) == 2, "invalid normals are not projected"

    diag = kmeans_semisphere(orient_and_project_normals(estimate_normals(box_interior(), 10)))
    populations = np.array([c.population for c in diag], dtype=float)
    populations /= populations.sum()
    assert (populations >= 0.05).all(), f"room populations {populations.round(3)}"

    print("  mirror / inward flip / room covers all five seeds ✓")
    return True


def test_kmeans_semisphere():
    print("\n[TEST] Semi-Sphere k-Means")

    diag = kmeans_semisphere(SemiSphereProjection(np.repeat(CANONICAL_SEEDS, 50, axis=0)))
    assert all(c.displacement == 0.0 for c in diag), "canonical copies must not move the seeds"
    assert [c.population for c in diag] == [50] * 5, "equal populations"

    up = {c.seed_id: c for c in kmeans_semisphere(SemiSphereProjection(np.tile([0.0, 0.0, 1.0], (100, 1))))}
    assert up['+z'].population == 100, "+z takes every direction"
    assert all(up[s].population == 0 and up[s].displacement == 2.0 for s in ('+x', '-x', '+y', '-y')), \
        "empty clusters have displacement 2"

    # 2 deg bundles; horizontal seeds are perturbed within the horizon so z stays >= 0
    g = rng(32)
    bundles = []
    for seed in CANONICAL_SEEDS:
        noise = np.radians(2.0) * g.normal(size=(200, 3))
        noise[:, 2] = 0.0
        d = seed + noise
        bundles.append(d / np.linalg.norm(d, axis=1, keepdims=True))
    diag = kmeans_semisphere(SemiSphereProjection(np.vstack(bundles)))
    assert [c.population for c in diag] == [200] * 5, "bundles stay with their seeds"
    worst = max(c.displacement for c in diag)
    assert worst < 0.02, f"2 deg bundles moved a seed by {worst:.4f}"

    print(f"  fixed point / single direction / bundles (max {worst:.4f}) ✓")
    return True


def test_semisphere_check():
    print("\n[TEST] Semi-Sphere Check")

    params = FragmentParams()
    room = semisphere_check(box_interior(), params, trajectory_length=50.0, members=[0])
    assert room.passed, f"room rejected: {room.reason} mean={room.mean_displacement}"
    assert len(room.diagnostics) == 5 and room.normals_used > 0, "diagnostics recorded"

    ground = semisphere_check(ground_only(), params, trajectory_length=50.0, members=[0])
    assert not ground.passed and ground.reason == 'dispersion', f"ground accepted ({ground.reason})"
    assert ground.mean_displacement >= 1.6 - 1e-9, "four empty seeds -> mean displacement >= 1.6"

    short = semisphere_check(box_interior(), params, trajectory_length=5.0, members=[0])
    assert not short.passed and short.reason == 'short-trajectory', "short trajectory must fail first"

    print(f"  room passes (mean {room.mean_displacement:.3f}); ground / short fail ✓")
    return True


def test_ssc_appends_until_valid():
    print("\n[TEST] SSC Validation")

    cloud = ground_then_room()
    traj = straight_trajectory(20.0, speed_mps=5.0)
    result = fragment_cloud(cloud, traj, FragmentParams())
    assert len(result.initial) == 2, f"two 10 s initial fragments, got {len(result.initial)}"
    assert len(result.fragments) == 1, f"road-only fragment must merge, got {len(result.fragments)}"
    emitted = result.fragments[0]
    assert emitted.members == [0, 1] and emitted.status == FragmentStatus.VALIDATED, \
        f"members {emitted.members} status {emitted.status}"
    assert emitted.append_count == 1 and len(emitted.history) == 2, "one append, two attempts"
    assert emitted.history[0].reason == 'dispersion' and emitted.history[1].passed, "road fails, union passes"
    assert all(f.merged_into == 0 and f.status == FragmentStatus.MERGED for f in result.initial), \
        "consumed initial fragments record where they went"
    assert emitted.size == len(cloud), "the emitted fragment covers both ranges"

    capped = fragment_cloud(cloud, traj, FragmentParams(max_span_fragments=1))
    statuses = [f.status for f in capped.fragments]
    assert statuses == [FragmentStatus.VALIDATED_AT_CAP, FragmentStatus.VALIDATED], \
        f"cap of 1 must emit the road at cap, got {statuses}"

    with tempfile.TemporaryDirectory() as tmp:
        back = read_fragments_json(write_fragments_json(result, Path(tmp) / "fragments.json"))
    assert [(f.id, f.start, f.stop, f.members) for f in back] == [(0, 0, len(cloud), [0, 1])], "JSON round trip"

    print("  road + room -> one validated fragment; cap respected ✓")
    return True


def test_trailing_failure_absorbed():
    print("\n[TEST] SSC Trailing Fragment")

    room = box_interior(t0=0.0, t1=9.9)
    ground = ground_only(t0=10.0, t1=19.9)
    cloud = PointCloud(np.vstack([room.xyz, ground.xyz + [60.0, 0.0, 0.0]]),
                       gps_time=np.concatenate([room.gps_time, ground.gps_time]))
    emitted = ssc_validate(initial_fragmentation(cloud, None, 'temporal', 10.0), cloud,
                           straight_trajectory(20.0, speed_mps=5.0), FragmentParams())
    assert len(emitted) == 1 and emitted[0].members == [0, 1], f"trailing road must be absorbed: {emitted}"
    assert emitted[0].stop == len(cloud) and emitted[0].status == FragmentStatus.VALIDATED, \
        "absorbed range reaches the end, status kept"

    print("  failing tail merged backwards ✓")
    return True


def test_fixed_strategies():
    print("\n[TEST] Fixed Strategies")

    cloud = line_cloud(np.linspace(0.0, 95.0, 951))
    traj = straight_trajectory(95.0)
    fixed = fragment_cloud(cloud, traj, FragmentParams(strategy='fixed-time'), fixed_interval_s=30.0)
    assert len(fixed.fragments) == 4, f"95 s at 30 s -> 4, got {len(fixed.fragments)}"
    assert all(f.status == FragmentStatus.VALIDATED and not f.history for f in fixed.fragments), \
        "fixed fragments are not checked"
    by_length = fragment_cloud(cloud, traj, FragmentParams(strategy='fixed-length', length_m=100.0))
    assert len(by_length.fragments) == 5, f"475 m at 100 m -> 5, got {len(by_length.fragments)}"

    shuffled = cloud.subset(rng(33).permutation(len(cloud)))
    ordered = fragment_cloud(shuffled, traj, FragmentParams(strategy='fixed-time'), fixed_interval_s=30.0)
    assert (np.diff(ordered.cloud.gps_time) >= 0).all(), "fragmentation orders the cloud by time"
    assert np.array_equal(shuffled.xyz[ordered.order], ordered.cloud.xyz), "order maps back to the input"

    print("  fixed-time / fixed-length / ordering ✓")
    return True


def test_single_gap_fragment_count():
    """Five 10 s windows, façades missing in the middle one: exactly one merge."""
    print("\n[TEST] SSC on a Corridor with One Gap")

    pieces = []
    for k in range(5):
        t0 = 10.0 * k
        if k == 2:
            road = grid_plane(2, 0.0, (0.0, 12.0), 0.2, (0.0, 8.0))
            times = t0 + 9.9 * road[:, 0] / 12.0
            order = np.argsort(times, kind='stable')
            piece = PointCloud(road[order], gps_time=times[order])
        else:
            piece = box_interior(t0=t0, t1=t0 + 9.9)
        pieces.append(PointCloud(piece.xyz + [12.2 * k, 0.0, 0.0], gps_time=piece.gps_time))
    cloud = PointCloud(np.vstack([p.xyz for p in pieces]), gps_time=np.concatenate([p.gps_time for p in pieces]))

    result = fragment_cloud(cloud, straight_trajectory(50.0, speed_mps=5.0), FragmentParams())
    assert len(result.initial) == 5, f"five initial fragments, got {len(result.initial)}"
    assert len(result.fragments) == len(result.initial) - 1, \
        f"{len(result.initial)} initial -> {len(result.fragments)} emitted, expected one merge"
    assert [f.members for f in result.fragments] == [[0], [1], [2, 3], [4]], \
        f"members {[f.members for f in result.fragments]}"
    assert all(f.status == FragmentStatus.VALIDATED for f in result.fragments), "every emitted fragment passes"
    assert result.fragments[2].history[0].reason == 'dispersion', "the road window fails on its own"

    print(f"  {len(result.initial)} initial -> {len(result.fragments)} emitted ✓")
    return True


TESTS = [
    test_temporal_fragments,
    test_spatial_fragments,
    test_trajectory_length_check,
    test_align_longest_axis,
    test_projection,
    test_kmeans_semisphere,
    test_semisphere_check,
    test_ssc_appends_until_valid,
    test_trailing_failure_absorbed,
    test_fixed_strategies,
    test_single_gap_fragment_count,
]


def run_all_tests():
    return run_tests("MLSREG-KIT FRAGMENT TEST SUITE", TESTS)


if __name__ == "__main__":
    success = run_all_tests()
    sys.exit(0 if success else 1)
