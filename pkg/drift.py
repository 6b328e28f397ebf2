#!/usr/bin/env python3
"""
MLSREG-KIT Drift
Per-fragment transforms expressed relative to the first valid fragment,
interpolation of failed fragments, colored trajectory export and plots.
"""
import csv
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from cloud_io import Trajectory, write_ply
from core import PointCloud, RigidTransform, compose, invert, rotation_to_euler

try:
    import matplotlib
    matplotlib.use('Agg')
    import matplotlib.pyplot as plt
    PLOT_AVAILABLE = True
except ImportError:
    PLOT_AVAILABLE = False
    plt = None  # type: ignore

logger = logging.getLogger(__name__)

COMPONENTS = ('rx', 'ry', 'rz', 'tx', 'ty', 'tz', 'norm')
DRIFT_COLUMNS = ['fragment', 'valid', 'interpolated', 'rx_deg', 'ry_deg', 'rz_deg',
                 'tx_m', 'ty_m', 'tz_m', 'norm_m']
LOW_COLOR = np.array([0.0, 0.0, 255.0])
HIGH_COLOR = np.array([255.0, 0.0, 0.0])
FAILED_COLOR = (0, 0, 0)


@dataclass
class DriftParams:
    fixed_interval_s: float = field(default=30.0, metadata={"range": (0.1, 86_400.0)})
    component: str = field(default='norm', metadata={"choices": COMPONENTS})
    plot: bool = True


class DriftEntry(NamedTuple):
    fragment: int
    valid: bool
    interpolated: bool
    rx: float
    ry: float
    rz: float
    tx: float
    ty: float
    tz: float
    norm: float


@dataclass
class DriftSeries:
    """Columns per fragment; values is (n, 6) as rx, ry, rz (deg), tx, ty, tz (m).

    Rows that are neither valid nor interpolated hold NaN.
    """

    ids: np.ndarray
    valid: np.ndarray
    interpolated: np.ndarray
    values: np.ndarray

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def norm(self) -> np.ndarray:
        return np.linalg.norm(self.values[:, 3:], axis=1)

    @property
    def defined(self) -> np.ndarray:
        return self.valid | self.interpolated

    def component(self, name: str) -> np.ndarray:
        if name == 'norm':
            return self.norm
        return self.values[:, COMPONENTS.index(name)]

    def entries(self) -> Iterator[DriftEntry]:
        norm = self.norm
        for i in range(len(self)):
            yield DriftEntry(int(self.ids[i]), bool(self.valid[i]), bool(self.interpolated[i]),
                             *(float(v) for v in self.values[i]), float(norm[i]))


def build_drift_series(fragment_transforms: Sequence[Tuple[int, Optional[RigidTransform]]]) -> DriftSeries:
    """Decompose compose(invert(T_first), T_k) per fragment; None marks a failure."""
    if not any(t is not None for _, t in fragment_transforms):
        raise ValueError("drift series needs at least one valid fragment transform")
    first = next(t for _, t in fragment_transforms if t is not None)
    base = invert(first)
    n = len(fragment_transforms)
    values = np.full((n, 6), np.nan)
    valid = np.zeros(n, dtype=bool)
    for i, (_, t) in enumerate(fragment_transforms):
        if t is None:
            continue
        rel = compose(base, t)
        angles = rotation_to_euler(rel)
        values[i] = [angles.rx, angles.ry, angles.rz, *rel.translation]
        valid[i] = True
    ids = np.array([int(fid) for fid, _ in fragment_transforms], dtype=np.int64)
    return DriftSeries(ids, valid, np.zeros(n, dtype=bool), values)


def interpolate_failed(series: DriftSeries) -> DriftSeries:
    """Linear interpolation by fragment id between valid neighbors; ends copy the nearest valid row."""
    if not series.valid.any():
        raise ValueError("cannot interpolate a drift series with no valid fragment")
    missing = ~series.valid
    if not missing.any():
        return series
    x = series.ids.astype(np.float64)
    values = series.values.copy()
    for c in range(values.shape[1]):
        values[missing, c] = np.interp(x[missing], x[series.valid], series.values[series.valid, c])
    return replace(series, values=values, interpolated=missing.copy())


# ============================================================================
#  COLORED TRAJECTORY
# ============================================================================

def ramp_colors(values: np.ndarray) -> np.ndarray:
    """Linear blue to red ramp between min and max; a constant series maps to blue."""
    lo, hi = float(np.min(values)), float(np.max(values))
    u = np.zeros(len(values)) if hi <= lo else (values - lo) / (hi - lo)
    return np.rint(LOW_COLOR + u[:, None] * (HIGH_COLOR - LOW_COLOR)).astype(np.uint8)


def sample_fragments(times: np.ndarray, spans: Sequence[Tuple[int, float, float]]) -> np.ndarray:
    """Row into spans for each time; times outside every span go to the nearest span."""
    starts = np.array([s[1] for s in spans])
    ends = np.array([s[2] for s in spans])
    row = np.clip(np.searchsorted(starts, times, side='right') - 1, 0, len(spans) - 1)
    # gaps between spans: pick the closer neighbor
    after = np.clip(row + 1, 0, len(spans) - 1)
    closer_next = (times > ends[row]) & (starts[after] - times < times - ends[row])
    return np.where(closer_next, after, row)


def export_colored_trajectory(series: DriftSeries, trajectory: Trajectory,
                              fragment_spans: Sequence[Tuple[int, float, float]],
                              component: str = 'norm', path='trajectory_drift.ply') -> Path:
    """Trajectory samples colored by one drift component; failed, uninterpolated spans are black."""
    if component not in COMPONENTS:
        raise ValueError(f"component must be one of {COMPONENTS}, got {component!r}")
    spans = sorted(fragment_spans, key=lambda s: s[1])
    row_of_id = {int(fid): i for i, fid in enumerate(series.ids)}
    span_rows = np.array([row_of_id.get(int(s[0]), -1) for s in spans])
    span_index = sample_fragments(trajectory.times, spans)
    rows = span_rows[span_index]

    values = series.component(component)
    defined = series.defined
    colors = np.zeros((len(trajectory), 3), dtype=np.uint8)
    colored = (rows >= 0) & defined[np.maximum(rows, 0)]
    if colored.any():
        colors[colored] = ramp_colors(values[rows[colored]])
    colors[~colored] = FAILED_COLOR
    cloud = PointCloud(trajectory.positions, gps_time=trajectory.times, colors=colors,
                       name=f"drift_{component}")
    return write_ply(cloud, path)


# ============================================================================
#  CSV + PLOTS
# ============================================================================

def write_drift_csv(series: DriftSeries, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', encoding='utf-8', newline='') as f:
        writer = csv.writer(f)
        writer.writerow(DRIFT_COLUMNS)
        for e in series.entries():
            nums = ['' if np.isnan(v) else repr(v) for v in e[3:]]
            writer.writerow([e.fragment, int(e.valid), int(e.interpolated), *nums])
    return path


def read_drift_csv(path) -> DriftSeries:
    ids, valid, interpolated, values = [], [], [], []
    with open(path, 'r', encoding='utf-8', newline='') as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != DRIFT_COLUMNS:
            raise ValueError(f"{path}: drift CSV header must be {','.join(DRIFT_COLUMNS)}")
        for row in reader:
            ids.append(int(row['fragment']))
            valid.append(row['valid'] == '1')
            interpolated.append(row['interpolated'] == '1')
            values.append([float(row[c]) if row[c] != '' else np.nan for c in DRIFT_COLUMNS[3:9]])
    return DriftSeries(np.array(ids, dtype=np.int64), np.array(valid, dtype=bool),
                       np.array(interpolated, dtype=bool), np.array(values, dtype=np.float64).reshape(-1, 6))


def plot_drift_series(series: DriftSeries, path, comparison: Optional[DriftSeries] = None,
                      labels: Tuple[str, str] = ('ssc', 'fixed')) -> Optional[Path]:
    """Six component panels plus translation magnitude; None without matplotlib."""
    if not PLOT_AVAILABLE:
        logger.warning("matplotlib not installed; skipping drift plot (pip install matplotlib)")
        return None
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    units = ['deg'] * 3 + ['m'] * 4
    fig, axes = plt.subplots(len(COMPONENTS), 1, figsize=(8, 14), sharex=True)
    for ax, name, unit in zip(axes, COMPONENTS, units):
        runs: List[Tuple[str, DriftSeries]] = [(labels[0], series)]
        if comparison is not None:
            runs.append((labels[1], comparison))
        for label, s in runs:
            y = s.component(name)
            ax.plot(s.ids, y, marker='.', label=label)
            failed = ~s.valid & s.defined
            if failed.any():
                ax.scatter(s.ids[failed], y[failed], color='k', zorder=3, s=12)
        ax.set_ylabel(f"{name} [{unit}]")
        ax.grid(True, alpha=0.3)
    axes[0].legend(loc='upper left')
    axes[-1].set_xlabel('fragment')
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
