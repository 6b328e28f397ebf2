#!/usr/bin/env python3
"""
MLSREG-KIT Pipeline
RegistrationPipeline: the stage runner behind every mlsreg subcommand.

preprocess -> fragment (SSC) -> per fragment coarse + PV-GICP -> evaluate -> drift
"""
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

from cloud_io import (
    FragmentRecord, RegistrationReport, Trajectory, read_point_cloud, read_trajectory, read_transform,
    write_ply, write_report, write_transform,
)
from coarse import CoarseRegistrationError, coarse_register
from config import PipelineConfig
from core import PointCloud, RigidTransform, apply_transform, crop_aabb
from drift import (
    PLOT_AVAILABLE, DriftSeries, build_drift_series, export_colored_trajectory,
    interpolate_failed, plot_drift_series, write_drift_csv,
)
from evaluate import AxisErrorSummary, PatchDefinition, auto_generate_patches, evaluate_fragment, overall_mean, read_patches
from fine import FineRegistrationError, pv_gicp
from fragment import FragmentationResult, fragment_cloud, write_fragments_json
from preprocess import preprocess_cloud

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_HARD_ERROR = 1
EXIT_FRAGMENT_FAILED = 2


def log_stage(fragment, stage: str, seconds: float, **extra) -> None:
    """One structured timing record: fragment=<id> stage=<name> seconds=<s> [key=value ...]."""
    tail = ''.join(f" {k}={v}" for k, v in extra.items())
    logger.info("fragment=%s stage=%s seconds=%.3f%s", fragment, stage, seconds, tail)


def log_failure(fragment, stage: str, error: Exception) -> None:
    logger.warning("fragment=%s stage=%s error=%s", fragment, stage, error)


@dataclass
class FragmentOutcome:
    record: FragmentRecord
    coarse: Optional[RigidTransform] = None
    registered: Optional[PointCloud] = None
    summary: Optional[AxisErrorSummary] = None
    diagnostics: Dict = field(default_factory=dict)


@dataclass
class RunResult:
    report: RegistrationReport
    series: Optional[DriftSeries]
    fragmentation: FragmentationResult
    outcomes: List[FragmentOutcome]
    artifacts: Dict[str, Path] = field(default_factory=dict)
    comparison: Optional[DriftSeries] = None
    fixed_outcomes: List[FragmentOutcome] = field(default_factory=list)

    @property
    def exit_code(self) -> int:
        return EXIT_FRAGMENT_FAILED if self.report.failed else EXIT_OK


class RegistrationPipeline:
    """Main registration pipeline"""

    def __init__(self, config: Optional[PipelineConfig] = None, out_dir: Path = Path('out')):
        self.config = config or PipelineConfig()
        self.out = Path(out_dir)

    def fragment_dir(self, fragment_id: int) -> Path:
        return self.out / 'fragments' / f"{fragment_id:03d}"

    # ------------------------------------------------------------------ stages

    def preprocess(self, cloud: PointCloud) -> PointCloud:
        tick = time.perf_counter()
        result, counts = preprocess_cloud(cloud, self.config.pre)
        log_stage('all', 'preprocess', time.perf_counter() - tick, cloud=cloud.name,
                  points=counts.get('sor', len(result)))
        return result

    def fragment(self, cloud: PointCloud, trajectory: Optional[Trajectory], strategy: Optional[str] = None) -> FragmentationResult:
        params = self.config.frag if strategy is None else replace(self.config.frag, strategy=strategy)
        tick = time.perf_counter()
        result = fragment_cloud(cloud, trajectory, params, self.config.drift.fixed_interval_s)
        log_stage('all', 'ssc' if params.strategy == 'ssc' else params.strategy, time.perf_counter() - tick,
                  initial=len(result.initial), emitted=len(result.fragments))
        return result

    def register(self, fragment_id: int, source: PointCloud, reference: PointCloud) -> FragmentOutcome:
        """Coarse + PV-GICP for one fragment; stage failures give an invalid record."""
        record = FragmentRecord(id=fragment_id, point_count=len(source))
        if source.gps_time is not None and len(source):
            record.t_start, record.t_end = float(source.gps_time.min()), float(source.gps_time.max())
        outcome = FragmentOutcome(record)
        seed = self.config.run.seed

        try:
            coarse = coarse_register(source, reference, self.config.coarse, fragment_id, seed)
        except CoarseRegistrationError as e:
            log_failure(fragment_id, 'coarse', e)
            record.status, record.failure = 'failed', f"coarse: {e}"
            return outcome
        record.coarse_s = coarse.seconds
        record.coarse_inliers = coarse.inliers
        outcome.coarse = coarse.transform
        outcome.diagnostics['coarse'] = {
            'inliers': coarse.inliers, 'iterations': coarse.iterations,
            'source_keypoints': coarse.source_keypoints, 'target_keypoints': coarse.target_keypoints,
            'matches': coarse.matches, 'filtered': coarse.filtered, 'timings_s': coarse.timings,
        }
        log_stage(fragment_id, 'coarse', coarse.seconds, inliers=coarse.inliers, matches=coarse.matches)

        try:
            final, fine = pv_gicp(source, reference, coarse.transform, self.config.fine)
        except FineRegistrationError as e:
            log_failure(fragment_id, 'gicp', e)
            record.status, record.failure = 'failed', f"fine: {e}"
            return outcome
        log_stage(fragment_id, 'planar_extraction', fine.planar_extraction_s, points=fine.planar_points,
                  planar_cells=fine.planar_cells)
        log_stage(fragment_id, 'gicp', fine.gicp_s, iterations=fine.iterations, converged=fine.converged)
        record.transform = final
        record.valid = True
        record.status = 'registered' if fine.converged else ('stalled' if fine.stalled else 'not_converged')
        record.fine_s = fine.planar_extraction_s + fine.gicp_s
        record.iterations = fine.iterations
        record.converged = fine.converged
        record.planar_fraction = fine.planar_fraction
        outcome.registered = apply_transform(source, final)
        outcome.diagnostics['fine'] = {
            'iterations': fine.iterations, 'converged': fine.converged, 'stalled': fine.stalled,
            'final_cost': fine.final_cost,
            'correspondences': fine.correspondences, 'cells': fine.cells, 'planar_cells': fine.planar_cells,
            'source_planar_fraction': fine.source_planar_fraction,
            'target_planar_fraction': fine.target_planar_fraction,
            'planar_extraction_s': fine.planar_extraction_s, 'gicp_s': fine.gicp_s,
        }
        return outcome

    def patches_for(self, reference: PointCloud, registered: PointCloud,
                    library: Optional[Sequence[PatchDefinition]] = None) -> List[PatchDefinition]:
        params = self.config.eval
        if library is not None:
            box = registered.aabb()
            return [p for p in library if box.dilate(p.radius).contains(p.center[None, :])[0]]
        return auto_generate_patches(reference, registered, params.per_axis, params, self.config.fine)

    def evaluate(self, outcome: FragmentOutcome, reference: PointCloud,
                 library: Optional[Sequence[PatchDefinition]] = None) -> List[PatchDefinition]:
        """Fill the record's error columns; returns the patches used."""
        if outcome.registered is None:
            return []
        tick = time.perf_counter()
        params = self.config.eval
        local = crop_aabb(reference, outcome.registered.aabb().dilate(params.patch_radius_m + params.patch_depth_m))
        patches = self.patches_for(local, outcome.registered, library)
        summary = evaluate_fragment(local, outcome.registered, patches, params.min_points, params.signed)
        record = outcome.record
        record.err_x = summary.axis_means.get('X')
        record.err_y = summary.axis_means.get('Y')
        record.err_z = summary.axis_means.get('Z')
        record.err_mean = summary.fragment_mean
        record.patch_errors = [v for _, v in summary.patch_errors]
        outcome.summary = summary
        log_stage(record.id, 'evaluate', time.perf_counter() - tick, patches=len(patches),
                  undefined=summary.undefined)
        return patches

    def process_fragment(self, fragment_id: int, source: PointCloud, reference: PointCloud,
                         library: Optional[Sequence[PatchDefinition]] = None) -> FragmentOutcome:
        outcome = self.register(fragment_id, source, reference)
        if self.config.run.evaluate:
            self.evaluate(outcome, reference, library)
        if not self.config.run.timings:
            outcome.record.coarse_s = outcome.record.fine_s = 0.0
        if self.config.run.write_fragments:
            self.save_fragment(outcome, source)
        return outcome

    # --------------------------------------------------------------- artifacts

    def save_fragment(self, outcome: FragmentOutcome, source: PointCloud) -> Path:
        """out/fragments/<id>/: fragment.ply, coarse.txt, final.txt, registered.ply, diagnostics.json."""
        folder = self.fragment_dir(outcome.record.id)
        folder.mkdir(parents=True, exist_ok=True)
        write_ply(source, folder / 'fragment.ply')
        if outcome.coarse is not None:
            write_transform(outcome.coarse, folder / 'coarse.txt')
        if outcome.record.transform is not None:
            write_transform(outcome.record.transform, folder / 'final.txt')
        if outcome.registered is not None:
            write_ply(outcome.registered, folder / 'registered.ply')
        diagnostics = dict(outcome.diagnostics)
        diagnostics['record'] = outcome.record.to_dict()
        if outcome.summary is not None:
            diagnostics['evaluation'] = outcome.summary.to_dict()
        (folder / 'diagnostics.json').write_text(json.dumps(diagnostics, indent=2), encoding='utf-8')
        return folder

    def build_report(self, outcomes: Sequence[FragmentOutcome], meta: Optional[Dict] = None) -> RegistrationReport:
        mean, fraction = overall_mean([o.summary for o in outcomes])
        return RegistrationReport([o.record for o in outcomes], mean, fraction, dict(meta or {}))

    def drift(self, outcomes: Sequence[FragmentOutcome]) -> DriftSeries:
        return interpolate_failed(build_drift_series([(o.record.id, o.record.transform) for o in outcomes]))

    def write_drift(self, series: DriftSeries, outcomes: Sequence[FragmentOutcome],
                    trajectory: Optional[Trajectory], suffix: str = '') -> Dict[str, Path]:
        paths = {'drift_csv': write_drift_csv(series, self.out / f"drift{suffix}.csv")}
        spans = [(o.record.id, o.record.t_start, o.record.t_end) for o in outcomes if o.record.t_start is not None]
        if trajectory is not None and spans:
            paths['trajectory'] = export_colored_trajectory(
                series, trajectory, spans, self.config.drift.component,
                self.out / f"trajectory_drift{suffix}.ply")
        return paths

    # ----------------------------------------------------------------- runner

    def register_all(self, fragmentation: FragmentationResult, reference: PointCloud,
                     library: Optional[Sequence[PatchDefinition]] = None) -> List[FragmentOutcome]:
        jobs = self.config.run.jobs
        work = [(f.id, f.take(fragmentation.cloud)) for f in fragmentation.fragments]
        if jobs <= 1 or len(work) <= 1:
            return [self.process_fragment(fid, cloud, reference, library) for fid, cloud in work]
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(self.process_fragment, fid, cloud, reference, library) for fid, cloud in work]
            return [f.result() for f in futures]

    def run(self, source: PointCloud, reference: PointCloud, trajectory: Optional[Trajectory],
            compare_fixed: bool = False) -> RunResult:
        """One-shot run on in-memory clouds; writes every artifact under out_dir."""
        self.out.mkdir(parents=True, exist_ok=True)
        source = self.preprocess(source)
        reference = self.preprocess(reference)
        fragmentation = self.fragment(source, trajectory)
        artifacts = {'fragments': write_fragments_json(fragmentation, self.out / 'fragments.json')}

        library = read_patches(self.config.eval.patches_file) if self.config.eval.patches_file else None
        outcomes = self.register_all(fragmentation, reference, library)
        report = self.build_report(outcomes, {
            'strategy': fragmentation.strategy,
            'seed': self.config.run.seed,
            'initial_fragments': len(fragmentation.initial),
            'emitted_fragments': len(fragmentation.fragments),
        })
        json_path, csv_path = write_report(report, self.out / 'report')
        artifacts.update(report_json=json_path, report_csv=csv_path)

        if all(o.record.transform is None for o in outcomes):
            logger.warning("every fragment failed; no drift series")
            return RunResult(report, None, fragmentation, outcomes, artifacts)
        series = self.drift(outcomes)
        artifacts.update(self.write_drift(series, outcomes, trajectory))

        comparison = None
        fixed_outcomes: List[FragmentOutcome] = []
        if compare_fixed:
            fixed = self.fragment(source, trajectory, strategy='fixed-time')
            fixed_pipeline = RegistrationPipeline(
                replace(self.config, run=replace(self.config.run, write_fragments=False)), self.out)
            fixed_outcomes = fixed_pipeline.register_all(fixed, reference, library)
            if any(o.record.transform is not None for o in fixed_outcomes):
                comparison = self.drift(fixed_outcomes)
                artifacts.update({f"{k}_fixed": v for k, v in
                                  self.write_drift(comparison, fixed_outcomes, trajectory, '_fixed').items()})
            failed = sum(o.record.transform is None for o in fixed_outcomes)
            logger.info("fixed-interval comparison: %d fragments, %d failed", len(fixed_outcomes), failed)

        if self.config.drift.plot and PLOT_AVAILABLE:
            plot = plot_drift_series(series, self.out / 'drift.png', comparison)
            if plot is not None:
                artifacts['drift_plot'] = plot
        return RunResult(report, series, fragmentation, outcomes, artifacts, comparison, fixed_outcomes)

    def run_files(self, source_path, target_path, trajectory_path=None, compare_fixed: bool = False) -> RunResult:
        source = read_point_cloud(source_path).renamed('source')
        reference = read_point_cloud(target_path).renamed('reference')
        trajectory = read_trajectory(trajectory_path) if trajectory_path else None
        return self.run(source, reference, trajectory, compare_fixed)


def run_pipeline(config_path, source_path, target_path, trajectory_path, out_dir,
                 seed: Optional[int] = None, jobs: Optional[int] = None) -> int:
    """Exit status of a one-shot run: 0 ok, 2 if any fragment failed, 1 on hard error."""
    try:
        config = PipelineConfig.load(config_path).with_run_overrides(seed, jobs)
        return RegistrationPipeline(config, Path(out_dir)).run_files(source_path, target_path, trajectory_path).exit_code
    except Exception as e:
        logger.error("pipeline failed: %s", e)
        return EXIT_HARD_ERROR


def load_fragment_transforms(out_dir: Path) -> List[Tuple[int, Optional[RigidTransform]]]:
    """(id, final transform or None) for every out/fragments/<id>/ folder."""
    pairs = []
    for folder in sorted((Path(out_dir) / 'fragments').iterdir()):
        if not folder.is_dir() or not folder.name.isdigit():
            continue
        final = folder / 'final.txt'
        pairs.append((int(folder.name), read_transform(final) if final.exists() else None))
    return pairs
