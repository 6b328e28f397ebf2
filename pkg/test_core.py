#!/usr/bin/env python3
"""
MLSREG-KIT Core Test Suite
Run: python3 test_core.py
"""

import sys

import numpy as np

from core import (
    Aabb, DegenerateGeometryError, PointCloud, RigidTransform, SpatialIndex, apply_transform,
    axis_rotation, brute_force_knn, compose, crop_aabb, estimate_normals, euler_to_rotation,
    invert, kabsch_fit, rotation_to_euler, transform_from_euler,
)
from fixtures import random_plane, random_transform, rng, run_tests


def test_apply_transform():
    """Identity, translation and a quarter turn about z."""
    print("\n[TEST] Apply Transform")

    cloud = PointCloud(rng(1).normal(size=(50, 3)))
    same = apply_transform(cloud, RigidTransform.identity())
    assert np.array_equal(same.xyz, cloud.xyz), "identity must leave positions bitwise equal"

    moved = RigidTransform.from_translation([1, 0, 0]).apply(np.zeros((1, 3)))
    assert np.allclose(moved, [[1, 0, 0]]), f"translation gave {moved}"

    quarter = RigidTransform(axis_rotation('z', 90.0)).apply(np.array([[1.0, 0.0, 0.0]]))
    assert np.abs(quarter - [[0, 1, 0]]).max() < 1e-12, f"rotation gave {quarter}"

    print("  identity / translation / rotation ✓")
    return True


def test_compose_invert():
    print("\n[TEST] Compose + Invert")

    t = random_transform(2)
    assert np.allclose(compose(t, RigidTransform.identity()).to_matrix(), t.to_matrix()), "T . I != T"
    ident = compose(t, invert(t))
    assert np.abs(ident.to_matrix() - np.eye(4)).max() < 1e-9, "T . T^-1 != I"

    inv = invert(RigidTransform.from_translation([1, 2, 3]))
    assert np.allclose(inv.translation, [-1, -2, -3]), f"inverse translation {inv.translation}"

    for seed in range(10):
        t = random_transform(seed, 45.0, 10.0)
        back = invert(invert(t))
        assert np.abs(back.to_matrix() - t.to_matrix()).max() < 1e-10, f"seed {seed}: double inverse drifted"

    # b is applied first
    a = RigidTransform.from_translation([1, 0, 0])
    b = RigidTransform(axis_rotation('z', 90.0))
    p = compose(a, b).apply(np.array([[1.0, 0.0, 0.0]]))
    assert np.allclose(p, [[1, 1, 0]]), f"compose order wrong: {p}"

    print("  compose / invert / order ✓")
    return True


def test_euler_round_trip():
    print("\n[TEST] Euler Decomposition")

    e = rotation_to_euler(RigidTransform.identity())
    assert (e.rx, e.ry, e.rz) == (0.0, 0.0, 0.0), f"identity gave {e}"

    e = rotation_to_euler(RigidTransform(axis_rotation('z', 30.0)))
    assert abs(e.rx) < 1e-9 and abs(e.ry) < 1e-9 and abs(e.rz - 30.0) < 1e-9, f"Rz(30) gave {e}"

    # R = Rz Ry Rx
    r = euler_to_rotation(10.0, 20.0, 30.0)
    expected = axis_rotation('z', 30.0) @ axis_rotation('y', 20.0) @ axis_rotation('x', 10.0)
    assert np.allclose(r, expected), "convention is not extrinsic X-Y-Z"

    g = rng(3)
    for _ in range(200):
        angles = g.uniform(-45.0, 45.0, 3)
        back = rotation_to_euler(transform_from_euler(*angles))
        assert np.abs(np.array(back[:3]) - angles).max() < 1e-6, f"{angles} -> {back}"

    near = rotation_to_euler(transform_from_euler(0.0, 89.5, 0.0))
    assert near.near_gimbal_lock, "ry=89.5 should flag gimbal lock"

    print("  200 random round trips within 1e-6 deg ✓")
    return True


def test_rigid_transform_validation():
    print("\n[TEST] RigidTransform Validation")

    try:
        RigidTransform(np.diag([1.0, 1.0, -1.0]))
        assert False, "reflection accepted"
    except ValueError:
        pass
    try:
        RigidTransform(np.eye(3) * 1.001)
        assert False, "scaled matrix accepted"
    except ValueError:
        pass
    try:
        RigidTransform(np.eye(3), [np.nan, 0, 0])
        assert False, "NaN translation accepted"
    except ValueError:
        pass

    print("  reflection / scale / NaN rejected ✓")
    return True


def test_knn_matches_brute_force():
    """Exhaustive comparison on every cloud size up to 2000 points."""
    print("\n[TEST] k-NN vs Brute Force")

    g = rng(4)
    for n in (1, 2, 7, 50, 500, 2000):
        xyz = g.uniform(-5, 5, (n, 3))
        query = g.uniform(-6, 6, (40, 3))
        k = min(8, n)
        dist, idx = SpatialIndex(xyz).knn(query, k)
        ref_dist, ref_idx = brute_force_knn(xyz, query, k)
        assert np.allclose(dist, ref_dist, atol=1e-12), f"n={n}: distances differ"
        # equal-distance ties may swap indices; the distances settle it
        same = idx == ref_idx
        assert same.all() or np.allclose(dist[~same], ref_dist[~same]), f"n={n}: neighbors differ"

    dist, idx = SpatialIndex(np.zeros((3, 3))).nearest(np.array([[5.0, 0, 0]]), max_distance=1.0)
    assert np.isinf(dist[0]) and idx[0] == 3, "miss beyond max_distance must be (inf, len)"

    print("  sizes 1..2000 ✓")
    return True


def test_normals():
    print("\n[TEST] Normal Estimation")

    plane = estimate_normals(PointCloud(random_plane(500, axis=2, size=10.0, seed=5)), k=10)
    cos = np.abs(plane.normals @ [0, 0, 1])
    assert plane.normal_valid.all(), "plane normals flagged invalid"
    assert cos.min() >= np.cos(np.radians(1.0)), f"z-plane normal off by {np.degrees(np.arccos(cos.min())):.3f} deg"

    wall = estimate_normals(PointCloud(random_plane(500, axis=0, offset=5.0, size=10.0, seed=6)), k=10)
    cos = np.abs(wall.normals @ [1, 0, 0])
    assert cos.min() >= np.cos(np.radians(1.0)), "x=5 plane normals not along x"

    line = estimate_normals(PointCloud(np.array([[0.0, 0, 0], [1, 1, 1], [2, 2, 2]])), k=10)
    assert not line.normal_valid.any(), "collinear points must give invalid normals"

    print("  z-plane, x-plane within 1 deg; collinear flagged ✓")
    return True


def test_kabsch():
    print("\n[TEST] Kabsch Fit")

    g = rng(7)
    src = g.uniform(-10, 10, (100, 3))
    truth = random_transform(8, 30.0, 5.0)
    fit = kabsch_fit(src, truth.apply(src))
    assert np.abs(fit.rotation - truth.rotation).max() <= 1e-9, "rotation not recovered exactly"
    assert np.abs(fit.translation - truth.translation).max() <= 1e-9, "translation not recovered exactly"

    ident = kabsch_fit(src, src)
    assert np.abs(ident.to_matrix() - np.eye(4)).max() < 1e-12, "identical pairs must give identity"

    # 1 mm noise on 1000 pairs; the centroid error is ~ sigma / sqrt(n)
    src = g.uniform(-10, 10, (1000, 3))
    noisy = truth.apply(src) + g.normal(0.0, 0.001, src.shape)
    fit = kabsch_fit(src, noisy)
    centroid_err = np.linalg.norm(fit.apply(src.mean(axis=0)[None])[0] - truth.apply(src.mean(axis=0)[None])[0])
    assert centroid_err < 5e-4, f"centroid error {centroid_err:.2e} m"

    try:
        kabsch_fit(np.array([[0.0, 0, 0], [1, 1, 1], [2, 2, 2]]), np.zeros((3, 3)))
        assert False, "collinear source accepted"
    except DegenerateGeometryError:
        pass

    print("  exact recovery <= 1e-9, noisy centroid < 0.5 mm ✓")
    return True


def test_aabb_crop():
    print("\n[TEST] AABB + Crop")

    box = Aabb([0, 0, 0], [1, 1, 1])
    cloud = PointCloud(np.array([[0.5, 0.5, 0.5], [1.0, 1.0, 1.0], [1.5, 0, 0]]))
    assert len(crop_aabb(cloud, box)) == 2, "crop keeps points on the closed box"
    assert np.allclose(box.dilate(1.0).extent, [3, 3, 3]), "dilate grows both sides"
    try:
        Aabb([1, 0, 0], [0, 1, 1])
        assert False, "inverted box accepted"
    except ValueError:
        pass

    print("  crop / dilate / validation ✓")
    return True


TESTS = [
    test_apply_transform,
    test_compose_invert,
    test_euler_round_trip,
    test_rigid_transform_validation,
    test_knn_matches_brute_force,
    test_normals,
    test_kabsch,
    test_aabb_crop,
]


def run_all_tests():
    return run_tests("MLSREG-KIT CORE TEST SUITE", TESTS)


if __name__ == "__main__":
    success = run_all_tests()
    sys.exit(0 if success else 1)
