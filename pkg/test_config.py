#!/usr/bin/env python3
"""
MLSREG-KIT Config Test Suite
Run: python3 test_config.py
"""

import sys
import tempfile
from pathlib import Path

from config import DEFAULT_CONFIG, ConfigError, PipelineConfig, config_keys
from fixtures import run_tests


def write_conf(tmp: str, text: str) -> Path:
    path = Path(tmp) / "pipeline.conf"
    path.write_text(text)
    return path


def test_defaults_file_matches_dataclasses():
    """configs/pipeline.conf lists every key with its default value."""
    print("\n[TEST] Default Config File")

    loaded = PipelineConfig.load(DEFAULT_CONFIG, env={})
    assert loaded.dump() == PipelineConfig().dump(), "configs/pipeline.conf drifted from the dataclass defaults"
    listed = [line.split('=', 1)[0].strip() for line in DEFAULT_CONFIG.read_text().splitlines()
              if line.strip() and not line.lstrip().startswith('#')]
    assert sorted(listed) == sorted(config_keys()), "default file must list every key exactly once"

    print(f"  {len(listed)} keys ✓")
    return True


def test_recommended_defaults():
    print("\n[TEST] Recommended Defaults")

    c = PipelineConfig()
    assert c.fine.voxel_edge_m == 1.0, "voxel edge 1 m"
    assert c.fine.angle_deg == 10.0 and c.fine.ratio == 0.70, "10 deg / 70% planarity"
    assert c.fine.min_points == 100, "100 points per planar cell"
    assert c.coarse.gror_k == 800, "K = 800 correspondences"
    assert c.frag.interval_s == 10.0 and c.frag.disp_threshold == 0.15, "10 s initial fragments, 0.15 threshold"
    assert c.frag.max_span_s == 60.0 and c.frag.max_span_fragments == 6, "60 s / 6 fragment cap"
    assert c.drift.fixed_interval_s == 30.0, "30 s fixed baseline"

    print("  stage defaults ✓")
    return True


def test_file_and_env_layers():
    print("\n[TEST] File + Environment Layers")

    with tempfile.TemporaryDirectory() as tmp:
        path = write_conf(tmp, "\n".join([
            "# comment",
            "fine.voxel_edge_m = 0.8",
            "fine.gicp_max_iterations = 30   # trailing comment",
            "pre.static_labels = 2, 6",
            "coarse.gror_weighted = yes",
            "eval.patches_file = ",
            "",
        ]))
        c = PipelineConfig.load(path, env={'MLSREG_FINE_VOXEL_EDGE_M': '1.5', 'MLSREG_RUN_SEED': '9',
                                           'MLSREG_SLOW': '1', 'HOME': '/root'})

    assert c.fine.voxel_edge_m == 1.5, "env overrides the file"
    assert c.fine.gicp.max_iterations == 30, "fine.gicp_* reaches the nested GICP params"
    assert c.pre.static_labels == (2, 6), f"tuple parse gave {c.pre.static_labels}"
    assert c.coarse.gror_weighted is True, "yes -> True"
    assert c.eval.patches_file == '', "empty value keeps an empty string"
    assert c.run.seed == 9, "MLSREG_RUN_SEED"

    print("  file < env precedence, nested keys, tuples, bools ✓")
    return True


def test_errors_name_the_key():
    print("\n[TEST] Config Errors")

    cases = [
        ("fine.voxel_edgee_m = 1.0\n", "fine.voxel_edgee_m", 1),
        ("frag.disp_threshold = 0.15\nfine.angle_deg = many\n", "fine.angle_deg", 2),
        ("fine.ratio = 1.5\n", "fine.ratio", None),
        ("frag.strategy = greedy\n", "frag.strategy", None),
        ("nosection = 3\n", "nosection", 1),
        ("pre.sor_k = 8\npre.sor_k = 9\n", "pre.sor_k", 2),
    ]
    with tempfile.TemporaryDirectory() as tmp:
        for text, key, line in cases:
            try:
                PipelineConfig.load(write_conf(tmp, text), env={})
                assert False, f"{text.strip()!r} was accepted"
            except ConfigError as e:
                assert e.key == key, f"error names {e.key!r}, expected {key!r}"
                assert key in str(e), f"message {e} lacks the key"
                if line is not None:
                    assert e.line == line, f"{key}: line {e.line}, expected {line}"
        try:
            PipelineConfig.load(Path(tmp) / "missing.conf", env={})
            assert False, "missing file accepted"
        except ConfigError:
            pass

    print(f"  {len(cases)} malformed files rejected with key + line ✓")
    return True


def test_run_overrides():
    print("\n[TEST] CLI Overrides")

    c = PipelineConfig().with_run_overrides(seed=4, jobs=3)
    assert (c.run.seed, c.run.jobs) == (4, 3), "seed/jobs override"
    try:
        PipelineConfig().with_run_overrides(jobs=0)
        assert False, "jobs=0 accepted"
    except ConfigError as e:
        assert e.key == 'run.jobs', f"error names {e.key!r}"

    print("  seed / jobs ✓")
    return True


TESTS = [
    test_defaults_file_matches_dataclasses,
    test_recommended_defaults,
    test_file_and_env_layers,
    test_errors_name_the_key,
    test_run_overrides,
]


def run_all_tests():
    return run_tests("MLSREG-KIT CONFIG TEST SUITE", TESTS)


if __name__ == "__main__":
    success = run_all_tests()
    sys.exit(0 if success else 1)
