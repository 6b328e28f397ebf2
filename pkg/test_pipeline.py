#!/usr/bin/env python3
"""
MLSREG-KIT Pipeline + CLI Test Suite
Run: python3 test_pipeline.py
"""

import json
import sys
import tempfile
from pathlib import Path

import numpy as np

import mlsreg
from cloud_io import (
    FragmentRecord, read_point_cloud, read_report, read_report_csv, read_transform, write_point_cloud, write_trajectory,
)
from config import PipelineConfig
from core import PointCloud, RigidTransform, compose
from drift import read_drift_csv
from evaluate import AxisErrorSummary
from fixtures import SLOW, rng, rotation_error_deg, run_tests, small_street, straight_trajectory, translation_error
from pipeline import (
    EXIT_FRAGMENT_FAILED, EXIT_HARD_ERROR, EXIT_OK, FragmentOutcome, RegistrationPipeline, RunResult,
    load_fragment_transforms, run_pipeline,
)
from synth import generate_scene, make_source, scene_drift_profile

TINY_STREET = "\n".join([
    "synth.street_length_m = 20",
    "synth.spacing_m = 0.5",
    "synth.clutter_fraction = 0.0",
    "drift.plot = false",
    "",
])


def outcome(fid: int, tx=None, t0: float = 0.0, summary=None) -> FragmentOutcome:
    """Hand-made outcome; tx=None marks a failed fragment."""
    record = FragmentRecord(id=fid, t_start=t0, t_end=t0 + 10.0, point_count=100)
    if tx is not None:
        record.transform = RigidTransform.from_translation([tx, 0.0, 0.0])
        record.valid = True
        record.status = 'registered'
    else:
        record.status, record.failure = 'failed', 'coarse: consensus of 0 below coarse.min_inliers=3'
    return FragmentOutcome(record, summary=summary)


def three_outcomes():
    return [
        outcome(0, 0.0, 0.0, AxisErrorSummary(fragment_mean=0.01, patch_errors=[('Z', 0.01)])),
        outcome(1, None, 10.0),
        outcome(2, 0.004, 20.0, AxisErrorSummary(fragment_mean=0.03, patch_errors=[('Z', 0.03)])),
    ]


def test_report_and_drift():
    print("\n[TEST] Pipeline: Report and Drift")

    outcomes = three_outcomes()
    with tempfile.TemporaryDirectory() as tmp:
        pipeline = RegistrationPipeline(PipelineConfig(), Path(tmp))
        report = pipeline.build_report(outcomes, {'strategy': 'ssc'})
        assert report.failed == [1], f"failed ids {report.failed}"
        assert abs(report.overall_mean - 0.02) < 1e-12 and report.fraction_below_2cm == 0.5, \
            f"overall {report.overall_mean} / {report.fraction_below_2cm}"
        assert RunResult(report, None, None, outcomes).exit_code == EXIT_FRAGMENT_FAILED, "failed fragment -> 2"

        series = pipeline.drift(outcomes)
        assert series.interpolated.tolist() == [False, True, False], "failed fragment is interpolated"
        assert abs(series.component('tx')[1] - 0.002) < 1e-12, f"interpolated tx {series.component('tx')[1]}"

        paths = pipeline.write_drift(series, outcomes, straight_trajectory(30.0))
        assert set(paths) == {'drift_csv', 'trajectory'}, f"artifacts {sorted(paths)}"
        back = read_drift_csv(paths['drift_csv'])
        assert np.allclose(back.values, series.values), "drift CSV changed the series"
        assert read_point_cloud(paths['trajectory']).colors is not None, "colored trajectory without colors"

        only = pipeline.write_drift(series, outcomes, None)
        assert set(only) == {'drift_csv'}, "no trajectory -> CSV only"

    ok = [outcome(0, 0.0), outcome(1, 0.001)]
    assert RunResult(pipeline.build_report(ok), None, None, ok).exit_code == EXIT_OK, "all valid -> 0"

    print("  failed ids / overall mean / interpolated drift / artifacts ✓")
    return True


def test_fragment_folders():
    print("\n[TEST] Pipeline: Fragment Folders")

    outcomes = three_outcomes()
    outcomes[0].coarse = RigidTransform.from_translation([0.5, 0.0, 0.0])
    piece = PointCloud(rng(91).uniform(0, 1, (50, 3)), gps_time=np.linspace(0, 10, 50))
    with tempfile.TemporaryDirectory() as tmp:
        pipeline = RegistrationPipeline(PipelineConfig(), Path(tmp))
        folders = [pipeline.save_fragment(o, piece) for o in outcomes]
        assert [f.name for f in folders] == ['000', '001', '002'], f"folders {[f.name for f in folders]}"
        assert (folders[0] / 'coarse.txt').exists() and not (folders[1] / 'final.txt').exists(), \
            "failed fragment has no final transform"
        assert len(read_point_cloud(folders[1] / 'fragment.ply')) == 50, "fragment cloud saved even on failure"
        diag = json.loads((folders[1] / 'diagnostics.json').read_text())
        assert diag['record']['valid'] is False and 'min_inliers' in diag['record']['failure'], f"diagnostics {diag}"

        pairs = load_fragment_transforms(Path(tmp))
        assert [fid for fid, _ in pairs] == [0, 1, 2] and pairs[1][1] is None, f"pairs {pairs}"
        assert abs(pairs[2][1].translation[0] - 0.004) < 1e-12, "final transform read back"

    print("  zero-padded folders, failures without final.txt ✓")
    return True


def test_register_failure():
    """A fragment that cannot be registered yields an invalid record, not an exception."""
    print("\n[TEST] Pipeline: Failed Fragment")

    tiny = PointCloud(rng(92).uniform(0, 1, (10, 3)), gps_time=np.arange(10.0))
    reference = PointCloud(rng(93).uniform(0, 1, (500, 3)))
    pipeline = RegistrationPipeline(PipelineConfig(), Path('unused'))
    result = pipeline.register(7, tiny, reference)
    record = result.record
    assert not record.valid and record.transform is None, "10 points registered"
    assert record.status == 'failed' and record.failure.startswith('coarse:'), f"failure {record.failure}"
    assert (record.t_start, record.t_end) == (0.0, 9.0) and record.point_count == 10, "span and count recorded"
    assert pipeline.evaluate(result, reference) == [] and result.summary is None, "nothing to evaluate"

    print(f"  {record.failure} ✓")
    return True


def test_run_pipeline_errors():
    print("\n[TEST] Pipeline: Hard Errors")

    with tempfile.TemporaryDirectory() as tmp:
        bad = Path(tmp) / "bad.conf"
        bad.write_text("fine.voxel_edge = 1.0\n")
        assert run_pipeline(bad, "s.ply", "t.ply", None, tmp) == EXIT_HARD_ERROR, "unknown key -> 1"
        assert run_pipeline(Path(tmp) / "missing.conf", "s.ply", "t.ply", None, tmp) == EXIT_HARD_ERROR, \
            "missing config -> 1"
        assert run_pipeline(None, Path(tmp) / "none.ply", Path(tmp) / "none.ply", None, tmp) == EXIT_HARD_ERROR, \
            "missing cloud -> 1"

    print("  bad config / missing inputs -> exit 1 ✓")
    return True


def test_cli_synth():
    print("\n[TEST] CLI: synth")

    with tempfile.TemporaryDirectory() as tmp:
        conf = Path(tmp) / "tiny.conf"
        conf.write_text(TINY_STREET)
        out = Path(tmp) / "demo"
        code = mlsreg.main(['synth', '--config', str(conf), '--out', str(out), '--seed', '2'])
        assert code == EXIT_OK, f"synth exit {code}"
        target = read_point_cloud(out / 'target.ply')
        source = read_point_cloud(out / 'source.ply')
        truth = read_transform(out / 'truth.txt')
        assert len(target) == len(source) > 0, "source and target must have the same points"
        assert np.allclose(source.xyz, truth.apply(target.xyz), atol=1e-6), "source is the perturbed target"
        assert (out / 'trajectory.txt').exists(), "trajectory missing"

        assert mlsreg.main([]) == EXIT_HARD_ERROR, "no command -> help and exit 1"
        try:
            mlsreg.main(['coarse', '--fragment', str(out / 'nope.ply'), '--target', str(out / 'target.ply')])
            assert False, "missing fragment accepted"
        except SystemExit as e:
            assert e.code == EXIT_HARD_ERROR, f"missing input exit {e.code}"

    print(f"  {len(target)} points, truth transform consistent ✓")
    return True


def test_cli_drift():
    print("\n[TEST] CLI: drift")

    with tempfile.TemporaryDirectory() as tmp:
        conf = Path(tmp) / "tiny.conf"
        conf.write_text(TINY_STREET)
        pipeline = RegistrationPipeline(PipelineConfig(), Path(tmp))
        piece = PointCloud(rng(94).uniform(0, 1, (20, 3)))
        for o in three_outcomes():
            pipeline.save_fragment(o, piece)
        code = mlsreg.main(['drift', '--config', str(conf), '--out', tmp])
        assert code == EXIT_FRAGMENT_FAILED, f"one interpolated fragment -> exit 2, got {code}"
        series = read_drift_csv(Path(tmp) / 'drift.csv')
        assert series.ids.tolist() == [0, 1, 2] and series.interpolated.tolist() == [False, True, False], \
            "drift CSV from the fragment folders"

        empty = Path(tmp) / "empty"
        (empty / 'fragments').mkdir(parents=True)
        assert mlsreg.main(['drift', '--config', str(conf), '--out', str(empty)]) == EXIT_HARD_ERROR, \
            "no fragments -> 1"

    print("  drift.csv rebuilt from fragment folders ✓")
    return True


STREET_OVERRIDES = (('coarse.iss_resolution_m', 0.2), ('coarse.fpfh_radius_m', 1.0), ('drift.plot', False))


def street_config(**run) -> PipelineConfig:
    config = PipelineConfig()
    for key, value in STREET_OVERRIDES + tuple((f"run.{k}", v) for k, v in run.items()):
        config = config.with_value(key, value)
    return config


def street_run(tmp: Path, jobs: int):
    spec = small_street(seed=7, drift_kind='rigid', length_m=100.0, spacing=0.2)
    spec.perturb_max_angle_deg, spec.perturb_max_translation_m = 5.0, 1.0
    scene = generate_scene(spec)
    source, truth = make_source(scene, spec)
    pipeline = RegistrationPipeline(street_config(jobs=jobs), tmp)
    return pipeline.run(source, scene.cloud, scene.trajectory, compare_fixed=jobs > 1), truth


def test_end_to_end():
    print("\n[TEST] Pipeline: Synthetic Street End to End")

    if not SLOW:
        print("  SKIPPED (set MLSREG_SLOW=1)")
        return True

    with tempfile.TemporaryDirectory() as tmp:
        result, truth = street_run(Path(tmp) / 'serial', jobs=1)
        assert result.exit_code == EXIT_OK, f"failed fragments {result.report.failed}"
        for record in result.report.fragments:
            residual = compose(record.transform, truth)
            rot = rotation_error_deg(residual, RigidTransform.identity())
            trans = translation_error(residual, RigidTransform.identity())
            assert rot < 0.1 and trans < 0.005, f"fragment {record.id}: {rot:.3f} deg / {trans * 1000:.2f} mm"
        assert np.nanmax(result.series.norm) < 0.005, "rigid perturbation must not look like drift"
        report = result.report
        assert report.overall_mean < 0.01, f"overall mean M3C2 error {report.overall_mean * 1000:.2f} mm"
        assert report.fraction_below_2cm >= 0.9, f"only {report.fraction_below_2cm:.0%} of patches below 2 cm"

        back = read_report(result.artifacts['report_json'])
        rows = read_report_csv(result.artifacts['report_csv'])
        assert [r.id for r in back.fragments] == [r['id'] for r in rows], "JSON and CSV disagree"

        parallel, _ = street_run(Path(tmp) / 'parallel', jobs=2)
        for a, b in zip(result.report.fragments, parallel.report.fragments):
            assert np.array_equal(a.transform.to_matrix(), b.transform.to_matrix()), \
                f"fragment {a.id}: result depends on run.jobs"
        assert parallel.comparison is not None and 'drift_csv_fixed' in parallel.artifacts, "fixed comparison run"

    print(f"  {len(result.report.fragments)} fragments within 0.1 deg / 5 mm, "
          f"mean error {report.overall_mean * 1000:.2f} mm, same result with 2 jobs ✓")
    return True


def test_drift_reproduction():
    """A rise-fall-rise tx drift is read back from the fragment transforms at fragment midpoints."""
    print("\n[TEST] Pipeline: Drift Reproduction")

    if not SLOW:
        print("  SKIPPED (set MLSREG_SLOW=1)")
        return True

    spec = small_street(seed=11, drift_kind='rise_fall_rise', length_m=200.0, spacing=0.2, peak_tx=0.007)
    scene = generate_scene(spec)
    source, _ = make_source(scene, spec)
    profile = scene_drift_profile(spec, scene.trajectory.total_length)
    with tempfile.TemporaryDirectory() as tmp:
        result = RegistrationPipeline(street_config(), Path(tmp)).run(source, scene.cloud, scene.trajectory)
    assert result.exit_code == EXIT_OK, f"failed fragments {result.report.failed}"

    records = result.report.fragments
    midpoints = np.array([(r.t_start + r.t_end) / 2.0 for r in records])
    injected = profile.at(scene.trajectory.arclength_at(midpoints))
    # the series is relative to the first fragment and registration undoes the drift
    expected_tx = -(injected[:, 3] - injected[0, 3])
    recovered = result.series.values
    tx_error = np.abs(recovered[:, 3] - expected_tx)
    assert tx_error.max() < 0.003, f"tx off by {tx_error.max() * 1000:.2f} mm: {recovered[:, 3]} vs {expected_tx}"
    assert np.abs(recovered[:, [4, 5]]).max() < 0.003, "ty / tz drift where none was injected"
    assert np.abs(recovered[:, :3]).max() < 0.05, f"rotation drift {np.abs(recovered[:, :3]).max():.3f} deg"
    assert np.ptp(expected_tx) > 0.002, "fragments must sample the profile's rise and fall"

    print(f"  {len(records)} fragments, worst tx error {tx_error.max() * 1000:.2f} mm ✓")
    return True


def test_facade_gap_comparison():
    """Fixed 30 s fragments lose the stretch without façades; SSC registers all of it."""
    print("\n[TEST] Pipeline: Façade Gap, SSC vs Fixed 30 s")

    if not SLOW:
        print("  SKIPPED (set MLSREG_SLOW=1)")
        return True

    # 150-300 m (30-60 s) is road only; no clutter gives it no keypoints
    spec = small_street(seed=13, drift_kind='none', length_m=440.0, gaps=(140.0, 320.0), clutter=0.0)
    scene = generate_scene(spec)
    source, _ = make_source(scene, spec)
    with tempfile.TemporaryDirectory() as tmp:
        result = RegistrationPipeline(street_config(), Path(tmp)).run(
            source, scene.cloud, scene.trajectory, compare_fixed=True)
    assert result.report.failed == [], f"SSC fragments failed: {result.report.failed}"
    assert any(len(f.members) > 1 for f in result.fragmentation.fragments), "SSC must merge across the gap"

    fixed_failed = [o.record.id for o in result.fixed_outcomes if not o.record.valid]
    assert len(result.fixed_outcomes) == 3, f"440 m at 30 s -> 3 fixed fragments, got {len(result.fixed_outcomes)}"
    assert len(fixed_failed) >= 1, "a 30 s window without façades must fail"
    assert result.comparison is not None and result.comparison.interpolated.any(), \
        "failed fixed fragments are interpolated in the comparison series"

    print(f"  SSC: {len(result.report.fragments)} registered; fixed: failed {fixed_failed} ✓")
    return True


STAGE_CONF = "\n".join([f"{key} = {str(value).lower()}" for key, value in STREET_OVERRIDES] + ["run.timings = false", ""])


def write_street(folder: Path):
    spec = small_street(seed=17, drift_kind='rigid', length_m=60.0, spacing=0.25)
    scene = generate_scene(spec)
    source, _ = make_source(scene, spec)
    folder.mkdir(parents=True)
    return (write_point_cloud(source, folder / 'source.ply'), write_point_cloud(scene.cloud, folder / 'target.ply'),
            write_trajectory(scene.trajectory, folder / 'trajectory.txt'))


def test_stagewise_matches_oneshot():
    """Stage-by-stage CLI runs agree with the one-shot pipeline; reruns give byte-identical reports."""
    print("\n[TEST] CLI: Stage by Stage vs One Shot")

    if not SLOW:
        print("  SKIPPED (set MLSREG_SLOW=1)")
        return True

    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        conf = tmp / 'street.conf'
        conf.write_text(STAGE_CONF)
        source, target, trajectory = (str(p) for p in write_street(tmp / 'data'))
        common = ['--config', str(conf)]

        for run in ('first', 'second'):
            code = mlsreg.main(['pipeline', '--source', source, '--target', target, '--trajectory', trajectory,
                                '--out', str(tmp / run)] + common)
            assert code == EXIT_OK, f"{run} one-shot run exited {code}"
        for name in ('report.json', 'report.csv', 'drift.csv', 'fragments.json'):
            assert (tmp / 'first' / name).read_bytes() == (tmp / 'second' / name).read_bytes(), \
                f"{name} differs between two runs with the same seed"

        stages = tmp / 'stages'
        stage_common = common + ['--out', str(stages)]
        assert mlsreg.main(['preprocess', '--input', source, '--output', str(stages / 'source_pre.ply')]
                           + stage_common) == EXIT_OK, "preprocess source"
        assert mlsreg.main(['preprocess', '--input', target, '--output', str(stages / 'target_pre.ply')]
                           + stage_common) == EXIT_OK, "preprocess target"
        assert mlsreg.main(['fragment', '--source', str(stages / 'source_pre.ply'), '--trajectory', trajectory]
                           + stage_common) == EXIT_OK, "fragment"
        folders = sorted((stages / 'fragments').iterdir())
        for folder in folders:
            piece = str(folder / 'fragment.ply')
            reference = str(stages / 'target_pre.ply')
            for argv in (['coarse', '--fragment', piece, '--target', reference],
                         ['fine', '--fragment', piece, '--target', reference],
                         ['evaluate', '--registered', str(folder / 'registered.ply'), '--target', reference]):
                assert mlsreg.main(argv + stage_common) == EXIT_OK, f"{argv[0]} on fragment {folder.name}"
        assert mlsreg.main(['drift'] + stage_common) == EXIT_OK, "drift"

        oneshot = load_fragment_transforms(tmp / 'first')
        stagewise = load_fragment_transforms(stages)
        assert [fid for fid, _ in oneshot] == [fid for fid, _ in stagewise], "different fragment ids"
        for (fid, a), (_, b) in zip(oneshot, stagewise):
            gap = np.abs(a.to_matrix() - b.to_matrix()).max()
            assert gap <= 1e-9, f"fragment {fid}: stage-wise transform differs by {gap:.2e}"
        one_drift = read_drift_csv(tmp / 'first' / 'drift.csv')
        stage_drift = read_drift_csv(stages / 'drift.csv')
        assert np.allclose(one_drift.values, stage_drift.values, rtol=0.0, atol=1e-9), "drift series differ"

    print(f"  {len(folders)} fragments agree within 1e-9, reruns byte-identical ✓")
    return True


TESTS = [
    test_report_and_drift,
    test_fragment_folders,
    test_register_failure,
    test_run_pipeline_errors,
    test_cli_synth,
    test_cli_drift,
    test_end_to_end,
    test_drift_reproduction,
    test_facade_gap_comparison,
    test_stagewise_matches_oneshot,
]


def run_all_tests():
    return run_tests("MLSREG-KIT PIPELINE TEST SUITE", TESTS)


if __name__ == "__main__":
    success = run_all_tests()
    sys.exit(0 if success else 1)
