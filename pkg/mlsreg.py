#!/usr/bin/env python3
"""
MLSREG-KIT CLI
Targetless registration of MLS point clouds to a reference cloud

Usage:
  mlsreg.py synth --out demo/                          # Synthetic street scene + drifted source
  mlsreg.py pipeline --source s.ply --target t.ply --trajectory traj.txt --out run/
  mlsreg.py preprocess --input raw.ply --output clean.ply
  mlsreg.py fragment --source clean.ply --trajectory traj.txt --out run/
  mlsreg.py coarse --fragment run/fragments/003/fragment.ply --target ref.ply
  mlsreg.py fine --fragment run/fragments/003/fragment.ply --target ref.ply
  mlsreg.py evaluate --registered run/fragments/003/registered.ply --target ref.ply
  mlsreg.py drift --out run/ --trajectory traj.txt
"""

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from cloud_io import (
    FragmentRecord, read_point_cloud, read_trajectory, read_transform, write_point_cloud,
    write_trajectory, write_transform,
)
from coarse import CoarseRegistrationError, coarse_register
from config import ConfigError, PipelineConfig
from core import MissingAttributeError, RigidTransform, apply_transform, crop_aabb, estimate_normals, rotation_to_euler
from drift import (
    PLOT_AVAILABLE, build_drift_series, export_colored_trajectory, interpolate_failed,
    plot_drift_series, write_drift_csv,
)
from evaluate import read_patches, write_patches
from fine import FineRegistrationError, export_planar_cells, pv_gicp, select_planar
from fragment import export_projection_ply, orient_and_project_normals, read_fragments_json, write_fragments_json
from pipeline import (
    EXIT_FRAGMENT_FAILED, EXIT_HARD_ERROR, EXIT_OK, FragmentOutcome, RegistrationPipeline,
    load_fragment_transforms,
)
from synth import generate_scene, make_source

LOGO = r'''
┌┬┐┬  ┌─┐┬─┐┌─┐┌─┐   ┬┌─┬┌┬┐
│││├──└─┐├┬┘├┤ │ ┬───├┴┐│ │   REGISTRATION
┴ ┴┴─┘└─┘┴└─└─┘└─┘   ┴ ┴┴ ┴   MLS fragments → reference, drift series out
'''


def load_pipeline(args) -> RegistrationPipeline:
    config = PipelineConfig.load(args.config).with_run_overrides(args.seed, args.jobs)
    return RegistrationPipeline(config, Path(args.out))


def require(path_str: str, what: str) -> Path:
    path = Path(path_str)
    if not path.exists():
        print(f"[!] {what} not found: {path_str}")
        sys.exit(EXIT_HARD_ERROR)
    return path


def fragment_id_of(args, fragment_path: Path) -> int:
    if args.id is not None:
        return args.id
    return int(fragment_path.parent.name) if fragment_path.parent.name.isdigit() else 0


def print_transform(label: str, t: RigidTransform):
    e = rotation_to_euler(t)
    tx, ty, tz = t.translation
    print(f"    {label}: R=({e.rx:+.4f}, {e.ry:+.4f}, {e.rz:+.4f}) deg  "
          f"t=({tx:+.4f}, {ty:+.4f}, {tz:+.4f}) m")


def print_report(result):
    report = result.report
    print(f"\n{'='*60}")
    print(f"Fragments: {len(report.fragments)} (failed: {len(report.failed)})")
    for record in report.fragments:
        status = 'OK' if record.valid else 'FAILED'
        err = '-' if record.err_mean is None else f"{record.err_mean * 1000:.2f} mm"
        print(f"  [{record.id:03d}] {status:<7} err={err:<10} coarse={record.coarse_s:.1f}s fine={record.fine_s:.1f}s"
              + (f"  ({record.failure})" if record.failure else ''))
    if report.overall_mean is not None:
        print(f"\nOverall mean error: {report.overall_mean * 1000:.2f} mm")
        print(f"Patches below 2 cm: {report.fraction_below_2cm:.0%}")
    print(f"{'='*60}")


# ============================================================================
#  COMMANDS
# ============================================================================

def cmd_synth(args):
    """Generate target, drifted source, trajectory and truth transform"""
    config = PipelineConfig.load(args.config)
    spec = config.synth
    if args.seed is not None:
        spec = replace(spec, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    print(f"[*] Generating scene (seed {spec.seed}, drift {spec.drift_kind})")
    scene = generate_scene(spec)
    source, truth = make_source(scene, spec)
    print(f"[+] Saved: {write_point_cloud(scene.cloud, out / 'target.ply')}")
    print(f"[+] Saved: {write_point_cloud(source, out / 'source.ply')}")
    print(f"[+] Saved: {write_trajectory(scene.trajectory, out / 'trajectory.txt')}")
    if truth is not None:
        print(f"[+] Saved: {write_transform(truth, out / 'truth.txt')}")
        print_transform('truth', truth)
    return EXIT_OK


def cmd_preprocess(args):
    """Static filter, voxel resampling, SOR"""
    pipeline = load_pipeline(args)
    cloud = read_point_cloud(require(args.input, 'Input cloud'))
    print(f"[*] Preprocessing {args.input} ({len(cloud)} points)")
    result = pipeline.preprocess(cloud)
    path = write_point_cloud(result, args.output or Path(args.out) / f"{Path(args.input).stem}_pre.ply")
    print(f"[+] Saved: {path} ({len(result)} points)")
    return EXIT_OK


def cmd_fragment(args):
    """Fragment a preprocessed source along its trajectory"""
    pipeline = load_pipeline(args)
    cloud = read_point_cloud(require(args.source, 'Source cloud')).renamed('source')
    trajectory = read_trajectory(args.trajectory) if args.trajectory else None
    print(f"[*] Fragmenting {len(cloud)} points ({args.strategy or pipeline.config.frag.strategy})")
    result = pipeline.fragment(cloud, trajectory, args.strategy)
    print(f"[+] Saved: {write_fragments_json(result, pipeline.out / 'fragments.json')}")
    for fragment in result.fragments:
        folder = pipeline.fragment_dir(fragment.id)
        folder.mkdir(parents=True, exist_ok=True)
        piece = fragment.take(result.cloud)
        write_point_cloud(piece, folder / 'fragment.ply')
        if args.export_projection and len(piece) >= 3:
            projection = orient_and_project_normals(estimate_normals(piece, pipeline.config.frag.normal_k))
            export_projection_ply(projection, folder / 'semisphere.ply')
        print(f"  [{fragment.id:03d}] {fragment.status.value:<18} points={fragment.size:<8} "
              f"span={fragment.span_s:.1f}s members={fragment.members}")
    print(f"[+] {len(result.fragments)} fragments under {pipeline.out / 'fragments'}/")
    return EXIT_OK


def cmd_coarse(args):
    """ISS + FPFH + GROR + RANSAC for one fragment"""
    pipeline = load_pipeline(args)
    fragment_path = require(args.fragment, 'Fragment cloud')
    fid = fragment_id_of(args, fragment_path)
    source = read_point_cloud(fragment_path)
    reference = read_point_cloud(require(args.target, 'Reference cloud'))
    print(f"[*] Coarse registration of fragment {fid}")
    try:
        result = coarse_register(source, reference, pipeline.config.coarse, fid, pipeline.config.run.seed)
    except CoarseRegistrationError as e:
        print(f"[!] fragment={fid} stage=coarse error={e}")
        return EXIT_FRAGMENT_FAILED
    out = Path(args.output) if args.output else fragment_path.parent / 'coarse.txt'
    print(f"[+] Saved: {write_transform(result.transform, out)}")
    print_transform('coarse', result.transform)
    print(f"    inliers={result.inliers} matches={result.matches} filtered={result.filtered}")
    return EXIT_OK


def cmd_fine(args):
    """PV-GICP for one fragment from its coarse transform"""
    pipeline = load_pipeline(args)
    fragment_path = require(args.fragment, 'Fragment cloud')
    coarse_path = Path(args.coarse) if args.coarse else fragment_path.parent / 'coarse.txt'
    coarse = read_transform(require(str(coarse_path), 'Coarse transform'))
    source = read_point_cloud(fragment_path)
    reference = read_point_cloud(require(args.target, 'Reference cloud'))
    fid = fragment_id_of(args, fragment_path)
    print(f"[*] PV-GICP for fragment {fid}")
    try:
        final, report = pv_gicp(source, reference, coarse, pipeline.config.fine)
    except FineRegistrationError as e:
        print(f"[!] fragment={fid} stage=gicp error={e}")
        return EXIT_FRAGMENT_FAILED
    folder = fragment_path.parent
    print(f"[+] Saved: {write_transform(final, Path(args.output) if args.output else folder / 'final.txt')}")
    print(f"[+] Saved: {write_point_cloud(apply_transform(source, final), folder / 'registered.ply')}")
    print_transform('final', final)
    print(f"    planar={report.planar_fraction:.0%} iterations={report.iterations} converged={report.converged}")
    if args.export_planar:
        moved = apply_transform(source, coarse).with_normals(None)
        local = crop_aabb(reference, moved.aabb().dilate(pipeline.config.fine.crop_margin_m))
        _, _, selection, _ = select_planar(moved, local, pipeline.config.fine)
        for p in export_planar_cells(moved, local, selection, folder / 'cells'):
            print(f"[+] Saved: {p}")
    return EXIT_OK


def cmd_evaluate(args):
    """M3C2 patch errors of a registered fragment"""
    pipeline = load_pipeline(args)
    registered_path = require(args.registered, 'Registered cloud')
    registered = read_point_cloud(registered_path)
    reference = read_point_cloud(require(args.target, 'Reference cloud'))
    patches_file = args.patches or pipeline.config.eval.patches_file
    library = read_patches(require(patches_file, 'Patch file')) if patches_file else None

    outcome = FragmentOutcome(FragmentRecord(id=fragment_id_of(args, registered_path)), registered=registered)
    patches = pipeline.evaluate(outcome, reference, library)
    summary = outcome.summary
    out = registered_path.parent / 'evaluation.json'
    out.write_text(json.dumps(summary.to_dict(), indent=2), encoding='utf-8')
    print(f"[+] Saved: {out}")
    if args.write_patches:
        print(f"[+] Saved: {write_patches(patches, registered_path.parent / 'patches.csv')}")
    for axis, mean in summary.axis_means.items():
        shown = 'missing' if mean is None else f"{mean * 1000:.2f} mm"
        print(f"    {axis}: {shown} ({summary.axis_counts.get(axis, 0)} patches)")
    if summary.fragment_mean is not None:
        print(f"    mean: {summary.fragment_mean * 1000:.2f} mm")
    return EXIT_OK


def cmd_drift(args):
    """Drift series from the per-fragment final transforms under --out"""
    pipeline = load_pipeline(args)
    pairs = load_fragment_transforms(pipeline.out)
    if not pairs:
        print(f"[!] No fragments under {pipeline.out / 'fragments'}/")
        return EXIT_HARD_ERROR
    series = interpolate_failed(build_drift_series(pairs))
    print(f"[+] Saved: {write_drift_csv(series, pipeline.out / 'drift.csv')}")
    fragments_json = pipeline.out / 'fragments.json'
    if args.trajectory and fragments_json.exists():
        trajectory = read_trajectory(args.trajectory)
        spans = [(f.id, f.t_start, f.t_end) for f in read_fragments_json(fragments_json)]
        path = export_colored_trajectory(series, trajectory, spans, pipeline.config.drift.component,
                                         pipeline.out / 'trajectory_drift.ply')
        print(f"[+] Saved: {path}")
    if pipeline.config.drift.plot:
        if PLOT_AVAILABLE:
            print(f"[+] Saved: {plot_drift_series(series, pipeline.out / 'drift.png')}")
        else:
            print("[*] matplotlib not available; skipping plot (pip install matplotlib)")
    failed = int((~series.valid).sum())
    print(f"    {len(series)} fragments, {failed} interpolated, max |t| = {np.nanmax(series.norm) * 1000:.2f} mm")
    return EXIT_FRAGMENT_FAILED if failed else EXIT_OK


def cmd_pipeline(args):
    """Full run: preprocess -> fragment -> coarse -> fine -> evaluate -> drift"""
    pipeline = load_pipeline(args)
    source = require(args.source, 'Source cloud')
    target = require(args.target, 'Reference cloud')
    print(f"[*] Registering {source.name} -> {target.name} (jobs={pipeline.config.run.jobs}, "
          f"seed={pipeline.config.run.seed})")
    result = pipeline.run_files(source, target, args.trajectory, args.compare_fixed)
    print_report(result)
    for name, path in sorted(result.artifacts.items()):
        print(f"[+] {name}: {path}")
    return result.exit_code


# ============================================================================
#  MAIN
# ============================================================================

def add_common(p):
    p.add_argument("--config", "-c", help="Config file (section.key = value)")
    p.add_argument("--out", "-o", default="out", help="Output directory (default: out)")
    p.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    p.add_argument("--seed", type=int, help="Override run.seed")
    p.add_argument("--jobs", "-j", type=int, help="Override run.jobs (parallel fragments)")


def main(argv=None):
    print(LOGO)

    parser = argparse.ArgumentParser(
        description="MLSREG-KIT Registration CLI",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  mlsreg.py synth --out demo/ --seed 3
  mlsreg.py pipeline --source demo/source.ply --target demo/target.ply --trajectory demo/trajectory.txt --out demo/run
  mlsreg.py fragment --source demo/source.ply --trajectory demo/trajectory.txt --strategy fixed-time --out demo/fixed
  mlsreg.py pipeline ... --compare-fixed --jobs 4
  MLSREG_FINE_VOXEL_EDGE_M=0.8 mlsreg.py pipeline ...
"""
    )
    subparsers = parser.add_subparsers(dest="command")

    # synth
    p_synth = subparsers.add_parser("synth", help="Generate a synthetic street scene")
    add_common(p_synth)

    # preprocess
    p_pre = subparsers.add_parser("preprocess", help="Static filter, voxel resampling, SOR")
    p_pre.add_argument("--input", "-i", required=True, help="Input cloud (.ply / .xyz)")
    p_pre.add_argument("--output", help="Output cloud (default: <out>/<stem>_pre.ply)")
    add_common(p_pre)

    # fragment
    p_frag = subparsers.add_parser("fragment", help="SSC or fixed fragmentation")
    p_frag.add_argument("--source", "-s", required=True, help="Preprocessed source cloud")
    p_frag.add_argument("--trajectory", "-t", help="Trajectory file (time x y z)")
    p_frag.add_argument("--strategy", choices=["ssc", "fixed-time", "fixed-length"], help="Override frag.strategy")
    p_frag.add_argument("--export-projection", action="store_true", help="Write semi-sphere PLY per fragment")
    add_common(p_frag)

    # coarse
    p_coarse = subparsers.add_parser("coarse", help="Coarse registration of one fragment")
    p_coarse.add_argument("--fragment", "-f", required=True, help="Fragment cloud")
    p_coarse.add_argument("--target", required=True, help="Preprocessed reference cloud")
    p_coarse.add_argument("--id", type=int, help="Fragment id (default: parent folder name)")
    p_coarse.add_argument("--output", help="Transform file (default: next to the fragment)")
    add_common(p_coarse)

    # fine
    p_fine = subparsers.add_parser("fine", help="PV-GICP of one fragment")
    p_fine.add_argument("--fragment", "-f", required=True, help="Fragment cloud")
    p_fine.add_argument("--target", required=True, help="Preprocessed reference cloud")
    p_fine.add_argument("--coarse", help="Coarse transform (default: coarse.txt next to the fragment)")
    p_fine.add_argument("--id", type=int, help="Fragment id (default: parent folder name)")
    p_fine.add_argument("--output", help="Transform file (default: final.txt next to the fragment)")
    p_fine.add_argument("--export-planar", action="store_true", help="Write planar / non-planar cell PLYs")
    add_common(p_fine)

    # evaluate
    p_eval = subparsers.add_parser("evaluate", help="M3C2 patch evaluation")
    p_eval.add_argument("--registered", "-r", required=True, help="Registered fragment cloud")
    p_eval.add_argument("--target", required=True, help="Preprocessed reference cloud")
    p_eval.add_argument("--patches", help="Patch CSV (default: eval.patches_file or auto)")
    p_eval.add_argument("--write-patches", action="store_true", help="Save the patches used")
    p_eval.add_argument("--id", type=int, help="Fragment id (default: parent folder name)")
    add_common(p_eval)

    # drift
    p_drift = subparsers.add_parser("drift", help="Drift series from fragment transforms")
    p_drift.add_argument("--trajectory", "-t", help="Trajectory for the colored export")
    add_common(p_drift)

    # pipeline
    p_run = subparsers.add_parser("pipeline", help="Full registration run")
    p_run.add_argument("--source", "-s", required=True, help="Source MLS cloud")
    p_run.add_argument("--target", required=True, help="Reference cloud")
    p_run.add_argument("--trajectory", "-t", help="Trajectory file (time x y z)")
    p_run.add_argument("--compare-fixed", action="store_true", help="Also run fixed-interval fragments")
    add_common(p_run)

    args = parser.parse_args(argv)

    commands = {
        "synth": cmd_synth,
        "preprocess": cmd_preprocess,
        "fragment": cmd_fragment,
        "coarse": cmd_coarse,
        "fine": cmd_fine,
        "evaluate": cmd_evaluate,
        "drift": cmd_drift,
        "pipeline": cmd_pipeline,
    }

    if args.command not in commands:
        parser.print_help()
        return EXIT_HARD_ERROR

    logging.basicConfig(level=getattr(logging, args.log_level),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return commands[args.command](args)
    except ConfigError as e:
        print(f"[!] Config error: {e}")
    except MissingAttributeError as e:
        print(f"[!] {e}")
    except (OSError, ValueError, RuntimeError) as e:
        print(f"[!] {args.command} failed: {e}")
    return EXIT_HARD_ERROR


if __name__ == "__main__":
    sys.exit(main())
