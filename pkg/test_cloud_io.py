#!/usr/bin/env python3
"""
MLSREG-KIT Cloud I/O Test Suite
Run: python3 test_cloud_io.py
"""

import sys
import tempfile
from pathlib import Path

import numpy as np

from cloud_io import (
    CloudFormatError, FragmentRecord, RegistrationReport, Trajectory, TrajectoryError,
    read_ply, read_point_cloud, read_report, read_report_csv, read_trajectory, read_transform,
    write_ply, write_point_cloud, write_report, write_trajectory, write_transform,
)
from core import PointCloud, transform_from_euler
from fixtures import random_transform, rng, run_tests


def test_ascii_ply():
    print("\n[TEST] ASCII PLY")

    text = "\n".join([
        "ply", "format ascii 1.0", "element vertex 3",
        "property float x", "property float y", "property float z", "end_header",
        "0 0 0", "1 0 0", "0 1 0.5", "",
    ])
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "three.ply"
        path.write_text(text)
        cloud = read_ply(path)
    assert len(cloud) == 3, f"expected 3 points, got {len(cloud)}"
    assert cloud.gps_time is None and cloud.labels is None and cloud.normals is None, "no attributes expected"
    assert np.allclose(cloud.xyz[2], [0, 1, 0.5]), f"third point {cloud.xyz[2]}"

    labeled = [
        "ply", "format ascii 1.0", "element vertex 2",
        "property float x", "property float y", "property float z", "property uchar classification",
        "end_header", "0 0 0 6",
    ]
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "labeled.ply"
        path.write_text("\n".join(labeled + ["1 0 0 2", ""]))
        assert read_ply(path).labels.tolist() == [6, 2], "uchar labels read"
        for bad in ("1 0 0 256", "1 0 0 -1", "1 0 0 " + str(2 ** 70)):
            path.write_text("\n".join(labeled + [bad, ""]))
            try:
                read_ply(path)
                assert False, f"out-of-range uchar accepted: {bad!r}"
            except CloudFormatError as e:
                assert e.line == 10 and 'classification' in str(e), f"error for {bad!r}: {e} (line {e.line})"

    print("  3-point ASCII file, uchar range checked ✓")
    return True


def test_binary_round_trip():
    """Random 10k cloud with every attribute survives write -> read bit for bit."""
    print("\n[TEST] Binary PLY Round Trip")

    g = rng(11)
    n = 10_000
    normals = g.normal(size=(n, 3))
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    cloud = PointCloud(
        g.uniform(-1e5, 1e5, (n, 3)), gps_time=np.sort(g.uniform(0, 1e6, n)),
        labels=g.integers(0, 20, n), intensity=g.uniform(0, 1, n), normals=normals,
        colors=g.integers(0, 256, (n, 3)), name='random',
    )
    with tempfile.TemporaryDirectory() as tmp:
        back = read_point_cloud(write_point_cloud(cloud, Path(tmp) / "random.ply"))
        ascii_back = read_ply(write_ply(cloud.subset(slice(0, 200)), Path(tmp) / "ascii.ply", binary=False))
        header = (Path(tmp) / "random.ply").read_bytes()[:600]

    assert np.array_equal(back.xyz, cloud.xyz), "positions differ after round trip"
    assert np.array_equal(back.gps_time, cloud.gps_time), "gps_time differs"
    assert np.array_equal(back.labels, cloud.labels), "labels differ"
    assert np.array_equal(back.normals, cloud.normals), "normals differ"
    assert np.array_equal(back.colors, cloud.colors), "colors differ"
    assert back.name == 'random', f"name {back.name!r}"
    assert b"property uchar classification" in header, "labels must be written as classification"
    assert np.array_equal(ascii_back.xyz, cloud.xyz[:200]), "ASCII %.17g must round trip exactly"

    print(f"  {n} points bit-identical ✓")
    return True


def test_empty_and_xyz():
    print("\n[TEST] Empty Cloud + XYZ Text")

    with tempfile.TemporaryDirectory() as tmp:
        empty = read_point_cloud(write_point_cloud(PointCloud(np.zeros((0, 3))), Path(tmp) / "empty.ply"))
        assert len(empty) == 0, "empty cloud must round trip to 0 points"

        cloud = PointCloud(np.array([[1.5, 2.5, 3.5], [4, 5, 6]]), gps_time=[10.0, 11.0], labels=[2, 6])
        back = read_point_cloud(write_point_cloud(cloud, Path(tmp) / "c.xyz"))
        assert np.array_equal(back.xyz, cloud.xyz), "xyz text positions differ"
        assert back.labels.tolist() == [2, 6], f"labels {back.labels}"

        bad = Path(tmp) / "bad.xyz"
        bad.write_text("0 0 0\n1 1\n")
        try:
            read_point_cloud(bad)
            assert False, "2-column line accepted"
        except CloudFormatError as e:
            assert e.line == 2, f"error should name line 2, got {e.line}"

        try:
            read_point_cloud(Path(tmp) / "cloud.las")
            assert False, "missing file accepted"
        except FileNotFoundError:
            pass

    print("  empty PLY / xyz round trip / line-numbered errors ✓")
    return True


def test_trajectory_io():
    print("\n[TEST] Trajectory Files")

    with tempfile.TemporaryDirectory() as tmp:
        two = Path(tmp) / "two.txt"
        two.write_text("0.0 0 0 0\n1.0 1 0 0\n")
        traj = read_trajectory(two)
        assert len(traj) == 2 and traj.total_length == 1.0, "2-line file -> 2 samples, 1 m"

        desc = Path(tmp) / "desc.txt"
        desc.write_text("1.0 0 0 0\n0.5 1 0 0\n")
        try:
            read_trajectory(desc)
            assert False, "descending time accepted"
        except TrajectoryError as e:
            assert e.line == 2, f"error should name line 2, got {e.line}"

        g = rng(12)
        t = np.cumsum(g.uniform(0.01, 0.2, 1000))
        big = Trajectory(t, np.cumsum(g.normal(size=(1000, 3)), axis=0))
        back = read_trajectory(write_trajectory(big, Path(tmp) / "big.txt"))
        assert np.array_equal(back.times, big.times) and np.array_equal(back.positions, big.positions), \
            "1000-sample trajectory did not round trip"

    s = Trajectory(np.array([0.0, 1.0, 2.0]), np.array([[0, 0, 0], [3, 4, 0], [3, 4, 0]]))
    assert s.arclength_at(0.5) == 2.5, "arclength interpolates linearly"
    assert s.time_at_arclength(5.0) == 1.0, "stationary tail must not hide the arrival time"

    print("  2-line / descending / 1000-sample round trip ✓")
    return True


def test_transform_file():
    print("\n[TEST] Transform Files")

    t = random_transform(13, 20.0, 50.0)
    with tempfile.TemporaryDirectory() as tmp:
        back = read_transform(write_transform(t, Path(tmp) / "t.txt"))
        bad = Path(tmp) / "bad.txt"
        bad.write_text("1 0 0\n0 1 0\n0 0 1\n")
        try:
            read_transform(bad)
            assert False, "3x3 matrix accepted as a transform"
        except ValueError:
            pass
    assert np.array_equal(back.to_matrix(), t.to_matrix()), "%.17g must round trip exactly"

    print("  4x4 text round trip ✓")
    return True


def test_report_files():
    print("\n[TEST] Registration Report")

    with tempfile.TemporaryDirectory() as tmp:
        _, csv_path = write_report(RegistrationReport(), Path(tmp) / "empty")
        lines = csv_path.read_text().strip().split("\n")
        assert len(lines) == 1 and lines[0].startswith("id,rx,ry,rz"), "empty report -> header-only CSV"

        records = []
        for i in range(22):
            valid = i != 7
            records.append(FragmentRecord(
                id=i, valid=valid, coarse_s=0.1 * i, fine_s=0.2 * i,
                transform=transform_from_euler(0.01 * i, -0.02 * i, 0.03 * i, (0.001 * i, 0.0, -0.002 * i))
                if valid else None,
                err_x=0.004 if valid else None, err_y=0.005 if valid else None,
                err_z=0.003 if valid else None, err_mean=0.004 if valid else None,
                failure=None if valid else "coarse: consensus of 4 below coarse.min_inliers=10",
            ))
        report = RegistrationReport(records, 0.004, 0.95, {'strategy': 'ssc'})
        json_path, csv_path = write_report(report, Path(tmp) / "report")
        rows = read_report_csv(csv_path)
        again = read_report(json_path)

    assert len(rows) == 22, f"22-fragment report must have 22 rows, got {len(rows)}"
    for record, row in zip(records, rows):
        expected = record.euler()
        got = [row[k] for k in ('rx', 'ry', 'rz', 'tx', 'ty', 'tz')]
        if record.valid:
            assert np.allclose(got, expected, atol=1e-9), f"fragment {record.id}: {got} vs {expected}"
            assert abs(row['coarse_s'] - record.coarse_s) < 1e-9, "timing column lost precision"
        else:
            assert all(v is None for v in got) and not row['valid'], "failed fragment must have empty pose"
    assert again.failed == [7], f"failed list {again.failed}"
    assert again.fragments[3].transform is not None, "JSON keeps the matrix"
    assert np.allclose(again.fragments[3].transform.to_matrix(), records[3].transform.to_matrix()), "matrix changed"

    print("  header-only / 22 rows / CSV + JSON parse back ✓")
    return True


TESTS = [
    test_ascii_ply,
    test_binary_round_trip,
    test_empty_and_xyz,
    test_trajectory_io,
    test_transform_file,
    test_report_files,
]


def run_all_tests():
    return run_tests("MLSREG-KIT CLOUD I/O TEST SUITE", TESTS)


if __name__ == "__main__":
    success = run_all_tests()
    sys.exit(0 if success else 1)
