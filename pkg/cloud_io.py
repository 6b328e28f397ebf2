#!/usr/bin/env python3
"""
MLSREG-KIT Cloud I/O
PLY (ascii / binary little endian) and XYZ point clouds, trajectories,
transform artifacts and registration reports.
"""
import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterator, List, NamedTuple, Optional, Tuple, Union

import numpy as np
from scipy.spatial import cKDTree

from core import PointCloud, RigidTransform, rotation_to_euler

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

PLY_ASCII = 'ply-ascii'
PLY_BINARY = 'ply-binary-le'
XYZ_TEXT = 'xyz-text'
FORMATS = (PLY_ASCII, PLY_BINARY, XYZ_TEXT)

PLY_TYPES = {
    'char': 'i1', 'int8': 'i1',
    'uchar': 'u1', 'uint8': 'u1',
    'short': 'i2', 'int16': 'i2',
    'ushort': 'u2', 'uint16': 'u2',
    'int': 'i4', 'int32': 'i4',
    'uint': 'u4', 'uint32': 'u4',
    'float': 'f4', 'float32': 'f4',
    'double': 'f8', 'float64': 'f8',
}
INTEGER_CODES = {'i1', 'u1', 'i2', 'u2', 'i4', 'u4'}


class CloudFormatError(ValueError):
    """Malformed cloud file. Carries the 1-based line or the byte offset."""

    def __init__(self, message: str, path: PathLike = '', line: Optional[int] = None,
                 offset: Optional[int] = None):
        where = ''
        if line is not None:
            where = f" (line {line})"
        elif offset is not None:
            where = f" (byte offset {offset})"
        super().__init__(f"{path}: {message}{where}" if path else f"{message}{where}")
        self.path = str(path)
        self.line = line
        self.offset = offset


class TrajectoryError(ValueError):
    def __init__(self, message: str, path: PathLike = '', line: Optional[int] = None):
        where = f" (line {line})" if line is not None else ''
        super().__init__(f"{path}: {message}{where}" if path else f"{message}{where}")
        self.line = line


def infer_format(path: PathLike, for_writing: bool = False) -> str:
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix in ('.xyz', '.txt', '.pts', '.csv'):
        return XYZ_TEXT
    if suffix != '.ply':
        raise CloudFormatError(f"cannot infer cloud format from extension {suffix!r}", path)
    if for_writing:
        return PLY_BINARY
    with open(path, 'rb') as f:
        head = f.read(256)
    return PLY_ASCII if b'format ascii' in head else PLY_BINARY


# ============================================================================
#  PLY
# ============================================================================

@dataclass
class PlyHeader:
    fmt: str
    vertex_count: int
    properties: List[Tuple[str, str]]
    header_bytes: int
    header_lines: int
    name: Optional[str] = None

    def dtype(self) -> np.dtype:
        return np.dtype([(name, '<' + code) for name, code in self.properties])


def parse_ply_header(raw: bytes, path: PathLike = '') -> PlyHeader:
    """Parse the header at the start of raw; the vertex element must come first."""
    pos = 0
    lineno = 0
    fmt = None
    vertex_count = None
    properties: List[Tuple[str, str]] = []
    current = None
    name = None

    def next_line() -> str:
        nonlocal pos, lineno
        end = raw.find(b'\n', pos)
        if end < 0:
            raise CloudFormatError("header ended before end_header", path, line=lineno + 1)
        text = raw[pos:end].decode('ascii', errors='replace').rstrip('\r')
        pos = end + 1
        lineno += 1
        return text

    if next_line().strip() != 'ply':
        raise CloudFormatError("missing 'ply' magic", path, line=1)

    while True:
        line = next_line().strip()
        parts = line.split()
        if not parts:
            continue
        key = parts[0]
        if key == 'end_header':
            break
        if key == 'comment':
            if len(parts) >= 3 and parts[1] == 'name':
                name = ' '.join(parts[2:])
            continue
        if key == 'obj_info':
            continue
        if key == 'format':
            if len(parts) != 3 or parts[2] != '1.0':
                raise CloudFormatError(f"malformed format line {line!r}", path, line=lineno)
            if parts[1] == 'ascii':
                fmt = PLY_ASCII
            elif parts[1] == 'binary_little_endian':
                fmt = PLY_BINARY
            else:
                raise CloudFormatError(f"unsupported PLY encoding {parts[1]!r}", path, line=lineno)
        elif key == 'element':
            if len(parts) != 3 or not parts[2].isdigit():
                raise CloudFormatError(f"malformed element line {line!r}", path, line=lineno)
            current = parts[1]
            if current == 'vertex':
                vertex_count = int(parts[2])
            elif vertex_count is None and int(parts[2]) > 0:
                raise CloudFormatError(f"element {current!r} precedes vertex", path, line=lineno)
        elif key == 'property':
            if current is None:
                raise CloudFormatError("property outside an element", path, line=lineno)
            if current != 'vertex':
                continue
            if len(parts) >= 2 and parts[1] == 'list':
                raise CloudFormatError("list properties are not supported on vertices", path, line=lineno)
            if len(parts) != 3:
                raise CloudFormatError(f"malformed property line {line!r}", path, line=lineno)
            code = PLY_TYPES.get(parts[1])
            if code is None:
                raise CloudFormatError(f"unsupported property type {parts[1]!r}", path, line=lineno)
            properties.append((parts[2], code))
        else:
            raise CloudFormatError(f"unknown header keyword {key!r}", path, line=lineno)

    if fmt is None:
        raise CloudFormatError("missing format line", path, line=lineno)
    if vertex_count is None:
        raise CloudFormatError("missing vertex element", path, line=lineno)
    names = [p[0] for p in properties]
    for axis in ('x', 'y', 'z'):
        if axis not in names:
            raise CloudFormatError(f"vertex element lacks property {axis!r}", path, line=lineno)
    if len(set(names)) != len(names):
        raise CloudFormatError("duplicate vertex property", path, line=lineno)
    return PlyHeader(fmt, vertex_count, properties, pos, lineno, name)


def _ply_ascii_body(raw: bytes, header: PlyHeader, path: PathLike) -> np.ndarray:
    text = raw[header.header_bytes:].decode('ascii', errors='replace').splitlines()
    n = header.vertex_count
    width = len(header.properties)
    data = np.empty(n, dtype=header.dtype())
    rows = []
    for i in range(n):
        lineno = header.header_lines + i + 1
        if i >= len(text):
            raise CloudFormatError(f"truncated payload: {i} of {n} vertices", path, line=lineno)
        tokens = text[i].split()
        if len(tokens) != width:
            raise CloudFormatError(f"expected {width} values, got {len(tokens)}", path, line=lineno)
        rows.append(tokens)
    for j, (prop, code) in enumerate(header.properties):
        column = [r[j] for r in rows]
        if code in INTEGER_CODES:
            data[prop] = _ascii_integers(column, prop, code, header, path)
            continue
        try:
            data[prop] = np.array([float(v) for v in column], dtype=np.float64)
        except ValueError:
            for i, v in enumerate(column):
                try:
                    float(v)
                except ValueError:
                    raise CloudFormatError(f"bad {prop} value {v!r}", path,
                                           line=header.header_lines + i + 1) from None
            raise
    return data


def _ascii_integers(column: List[str], prop: str, code: str, header: PlyHeader, path: PathLike) -> np.ndarray:
    """Integer column checked against the declared PLY type's range."""
    info = np.iinfo(np.dtype(code))
    out = np.empty(len(column), dtype=code)
    for i, v in enumerate(column):
        try:
            value = int(v)
        except ValueError:
            raise CloudFormatError(f"bad {prop} value {v!r}", path, line=header.header_lines + i + 1) from None
        if not info.min <= value <= info.max:
            raise CloudFormatError(f"{prop} value {value} outside {np.dtype(code).name} range "
                                   f"[{info.min}, {info.max}]", path, line=header.header_lines + i + 1)
        out[i] = value
    return out


def _ply_binary_body(raw: bytes, header: PlyHeader, path: PathLike) -> np.ndarray:
    dtype = header.dtype()
    need = header.vertex_count * dtype.itemsize
    have = len(raw) - header.header_bytes
    if have < need:
        complete = have // dtype.itemsize if dtype.itemsize else 0
        raise CloudFormatError(
            f"truncated payload: {complete} of {header.vertex_count} vertices",
            path, offset=header.header_bytes + complete * dtype.itemsize)
    return np.frombuffer(raw, dtype=dtype, count=header.vertex_count, offset=header.header_bytes)


def _cloud_from_columns(data: np.ndarray, name: str, path: PathLike) -> PointCloud:
    names = set(data.dtype.names)

    def cols(*keys):
        return np.column_stack([data[k].astype(np.float64) for k in keys])

    xyz = cols('x', 'y', 'z')
    if not np.isfinite(xyz).all():
        raise CloudFormatError("non-finite coordinates", path)
    label_key = 'classification' if 'classification' in names else ('label' if 'label' in names else None)
    normals = cols('nx', 'ny', 'nz') if {'nx', 'ny', 'nz'} <= names else None
    colors = None
    if {'red', 'green', 'blue'} <= names:
        colors = np.column_stack([data[k] for k in ('red', 'green', 'blue')]).astype(np.uint8)
    return PointCloud(
        xyz,
        gps_time=data['gps_time'].astype(np.float64) if 'gps_time' in names else None,
        labels=data[label_key].astype(np.uint16) if label_key else None,
        intensity=data['intensity'].astype(np.float64) if 'intensity' in names else None,
        normals=normals,
        colors=colors,
        name=name,
    )


def read_ply(path: PathLike) -> PointCloud:
    raw = Path(path).read_bytes()
    header = parse_ply_header(raw, path)
    if header.fmt == PLY_ASCII:
        data = _ply_ascii_body(raw, header, path)
    else:
        data = _ply_binary_body(raw, header, path)
    return _cloud_from_columns(data, header.name or Path(path).stem, path)


def _ply_columns(cloud: PointCloud) -> List[Tuple[str, str, str, np.ndarray]]:
    """(name, ply type, ascii fmt, values) for every attribute the cloud carries."""
    columns = [(axis, 'double', '%.17g', cloud.xyz[:, i]) for i, axis in enumerate('xyz')]
    if cloud.gps_time is not None:
        columns.append(('gps_time', 'double', '%.17g', cloud.gps_time))
    if cloud.labels is not None:
        wide = len(cloud.labels) and int(cloud.labels.max()) > 255
        columns.append(('classification', 'ushort' if wide else 'uchar', '%d', cloud.labels))
    if cloud.intensity is not None:
        columns.append(('intensity', 'double', '%.17g', cloud.intensity))
    if cloud.normals is not None:
        for i, axis in enumerate(('nx', 'ny', 'nz')):
            columns.append((axis, 'double', '%.17g', cloud.normals[:, i]))
    if cloud.colors is not None:
        for i, channel in enumerate(('red', 'green', 'blue')):
            columns.append((channel, 'uchar', '%d', cloud.colors[:, i]))
    return columns


def write_ply(cloud: PointCloud, path: PathLike, binary: bool = True) -> Path:
    path = Path(path)
    columns = _ply_columns(cloud)
    lines = [
        'ply',
        'format binary_little_endian 1.0' if binary else 'format ascii 1.0',
        'comment generated by mlsreg-kit',
        f"comment name {cloud.name}",
        f"element vertex {len(cloud)}",
    ]
    lines += [f"property {ptype} {name}" for name, ptype, _, _ in columns]
    lines.append('end_header')
    header = ('\n'.join(lines) + '\n').encode('ascii')

    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'wb') as f:
        f.write(header)
        if binary:
            dtype = np.dtype([(name, '<' + PLY_TYPES[ptype]) for name, ptype, _, _ in columns])
            body = np.empty(len(cloud), dtype=dtype)
            for name, _, _, values in columns:
                body[name] = values
            f.write(body.tobytes())
        elif len(cloud):
            for i in range(len(cloud)):
                f.write((' '.join(fmt % values[i] for _, _, fmt, values in columns) + '\n').encode('ascii'))
    return path


# ============================================================================
#  XYZ TEXT
# ============================================================================

def read_xyz(path: PathLike) -> PointCloud:
    """Whitespace separated `x y z [gps_time [classification]]`, # comments."""
    rows = []
    width = None
    first_line = None
    with open(path, 'r', encoding='utf-8') as f:
        for lineno, line in enumerate(f, 1):
            line = line.split('#', 1)[0].strip()
            if not line:
                continue
            parts = line.replace(',', ' ').split()
            if len(parts) not in (3, 4, 5):
                raise CloudFormatError(f"expected 3 to 5 columns, got {len(parts)}", path, line=lineno)
            if width is None:
                width, first_line = len(parts), lineno
            elif len(parts) != width:
                raise CloudFormatError(
                    f"column count {len(parts)} differs from {width} on line {first_line}", path, line=lineno)
            try:
                values = [float(v) for v in parts[:4]]
                if width == 5:
                    values.append(int(parts[4]))
            except ValueError:
                raise CloudFormatError(f"unparsable value in {line!r}", path, line=lineno) from None
            if not all(math.isfinite(v) for v in values[:3]):
                raise CloudFormatError("non-finite coordinate", path, line=lineno)
            rows.append(values)
    width = width or 3
    table = np.array(rows, dtype=np.float64).reshape(-1, width)
    return PointCloud(
        table[:, :3],
        gps_time=table[:, 3] if width >= 4 else None,
        labels=table[:, 4].astype(np.uint16) if width == 5 else None,
        name=Path(path).stem,
    )


def write_xyz(cloud: PointCloud, path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    columns = [cloud.xyz]
    fmt = ['%.17g'] * 3
    if cloud.gps_time is not None:
        columns.append(cloud.gps_time[:, None])
        fmt.append('%.17g')
        if cloud.labels is not None:
            columns.append(cloud.labels[:, None].astype(np.float64))
            fmt.append('%d')
    with open(path, 'w', encoding='utf-8') as f:
        f.write(f"# {cloud.name}\n")
        if len(cloud):
            np.savetxt(f, np.hstack(columns), fmt=fmt)
    return path


def read_point_cloud(path: PathLike, fmt: Optional[str] = None) -> PointCloud:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"cloud not found: {path}")
    fmt = fmt or infer_format(path)
    if fmt not in FORMATS:
        raise ValueError(f"unknown cloud format {fmt!r}, expected one of {FORMATS}")
    cloud = read_xyz(path) if fmt == XYZ_TEXT else read_ply(path)
    logger.debug("read %s: %d points (%s)", path, len(cloud), fmt)
    return cloud


def write_point_cloud(cloud: PointCloud, path: PathLike, fmt: Optional[str] = None) -> Path:
    fmt = fmt or infer_format(path, for_writing=True)
    if fmt == XYZ_TEXT:
        out = write_xyz(cloud, path)
    elif fmt in (PLY_ASCII, PLY_BINARY):
        out = write_ply(cloud, path, binary=(fmt == PLY_BINARY))
    else:
        raise ValueError(f"unknown cloud format {fmt!r}, expected one of {FORMATS}")
    logger.debug("wrote %s: %d points (%s)", out, len(cloud), fmt)
    return out


# ============================================================================
#  TRAJECTORY
# ============================================================================

class TrajectorySample(NamedTuple):
    gps_time: float
    position: Tuple[float, float, float]


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Time-stamped platform positions, strictly increasing in time."""

    times: np.ndarray
    positions: np.ndarray

    def __post_init__(self):
        times = np.ascontiguousarray(self.times, dtype=np.float64).reshape(-1)
        positions = np.ascontiguousarray(self.positions, dtype=np.float64).reshape(-1, 3)
        if len(times) != len(positions):
            raise TrajectoryError(f"{len(times)} times for {len(positions)} positions")
        if len(times) > 1 and not (np.diff(times) > 0).all():
            bad = int(np.flatnonzero(np.diff(times) <= 0)[0]) + 2
            raise TrajectoryError("time is not strictly increasing", line=bad)
        object.__setattr__(self, 'times', times)
        object.__setattr__(self, 'positions', positions)
        steps = np.linalg.norm(np.diff(positions, axis=0), axis=1)
        object.__setattr__(self, '_cumulative', np.concatenate(([0.0], np.cumsum(steps))))

    @classmethod
    def from_samples(cls, samples) -> "Trajectory":
        samples = list(samples)
        return cls(np.array([s.gps_time for s in samples], dtype=np.float64),
                   np.array([s.position for s in samples], dtype=np.float64).reshape(-1, 3))

    def __len__(self) -> int:
        return len(self.times)

    def samples(self) -> Iterator[TrajectorySample]:
        for t, p in zip(self.times, self.positions):
            yield TrajectorySample(float(t), (float(p[0]), float(p[1]), float(p[2])))

    @property
    def cumulative_length(self) -> np.ndarray:
        return self._cumulative

    @property
    def total_length(self) -> float:
        return float(self._cumulative[-1]) if len(self) else 0.0

    @property
    def span(self) -> Tuple[float, float]:
        return float(self.times[0]), float(self.times[-1])

    def arclength_at(self, t) -> np.ndarray:
        """Arclength travelled at time t, clamped to the sampled interval."""
        if len(self) == 0:
            raise TrajectoryError("empty trajectory")
        return np.interp(t, self.times, self._cumulative)

    def length_between(self, t0: float, t1: float) -> float:
        return float(self.arclength_at(t1) - self.arclength_at(t0))

    def position_at(self, t) -> np.ndarray:
        t = np.atleast_1d(np.asarray(t, dtype=np.float64))
        return np.column_stack([np.interp(t, self.times, self.positions[:, i]) for i in range(3)])

    def time_at_arclength(self, s) -> np.ndarray:
        """Inverse of arclength_at on the moving parts of the path."""
        moving = np.concatenate(([True], np.diff(self._cumulative) > 0))
        return np.interp(s, self._cumulative[moving], self.times[moving])

    def nearest_sample(self, xyz: np.ndarray) -> np.ndarray:
        _, idx = cKDTree(self.positions).query(np.asarray(xyz, dtype=np.float64).reshape(-1, 3))
        return idx

    def covers(self, t0: float, t1: float, slack: float = 1e-6) -> bool:
        return len(self) > 0 and self.times[0] - slack <= t0 and t1 <= self.times[-1] + slack


def read_trajectory(path: PathLike) -> Trajectory:
    """One `time x y z` record per line, strictly increasing time."""
    times, positions = [], []
    with open(path, 'r', encoding='utf-8') as f:
        for lineno, line in enumerate(f, 1):
            line = line.split('#', 1)[0].strip()
            if not line:
                continue
            parts = line.replace(',', ' ').split()
            if len(parts) != 4:
                raise TrajectoryError(f"expected 'time x y z', got {len(parts)} fields", path, line=lineno)
            try:
                t, x, y, z = (float(v) for v in parts)
            except ValueError:
                raise TrajectoryError(f"unparsable record {line!r}", path, line=lineno) from None
            if not all(math.isfinite(v) for v in (t, x, y, z)):
                raise TrajectoryError("non-finite value", path, line=lineno)
            if times and t <= times[-1]:
                raise TrajectoryError(f"time {t} does not increase after {times[-1]}", path, line=lineno)
            times.append(t)
            positions.append((x, y, z))
    return Trajectory(np.array(times), np.array(positions).reshape(-1, 3))


def write_trajectory(trajectory: Trajectory, path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', encoding='utf-8') as f:
        f.write("# time x y z\n")
        if len(trajectory):
            np.savetxt(f, np.column_stack([trajectory.times, trajectory.positions]), fmt='%.17g')
    return path


# ============================================================================
#  TRANSFORM ARTIFACTS
# ============================================================================

def write_transform(t: RigidTransform, path: PathLike) -> Path:
    """4x4 homogeneous matrix, row-major text."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savetxt(path, t.to_matrix(), fmt='%.17g')
    return path


def read_transform(path: PathLike) -> RigidTransform:
    try:
        m = np.loadtxt(path, dtype=np.float64, ndmin=2)
        return RigidTransform.from_matrix(m)
    except ValueError as e:
        raise ValueError(f"{path}: not a rigid 4x4 transform ({e})") from e


# ============================================================================
#  REGISTRATION REPORT
# ============================================================================

REPORT_COLUMNS = ['id', 'rx', 'ry', 'rz', 'tx', 'ty', 'tz',
                  'err_x', 'err_y', 'err_z', 'err_mean', 'coarse_s', 'fine_s', 'valid']


@dataclass
class FragmentRecord:
    """Outcome of one fragment's registration and evaluation."""

    id: int
    transform: Optional[RigidTransform] = None
    valid: bool = False
    coarse_s: float = 0.0
    fine_s: float = 0.0
    iterations: int = 0
    converged: bool = False
    coarse_inliers: int = 0
    planar_fraction: float = 0.0
    err_x: Optional[float] = None
    err_y: Optional[float] = None
    err_z: Optional[float] = None
    err_mean: Optional[float] = None
    t_start: Optional[float] = None
    t_end: Optional[float] = None
    point_count: int = 0
    status: str = ''
    failure: Optional[str] = None
    patch_errors: List[float] = field(default_factory=list)

    def __post_init__(self):
        if self.coarse_s < 0 or self.fine_s < 0:
            raise ValueError(f"fragment {self.id}: timings must be nonnegative")

    def euler(self) -> Tuple[Optional[float], ...]:
        if self.transform is None:
            return (None,) * 6
        angles = rotation_to_euler(self.transform)
        tx, ty, tz = (float(v) for v in self.transform.translation)
        return angles.rx, angles.ry, angles.rz, tx, ty, tz

    def csv_row(self) -> List[str]:
        values = [self.id, *self.euler(), self.err_x, self.err_y, self.err_z, self.err_mean,
                  self.coarse_s, self.fine_s]
        row = [str(self.id)] + [_fmt(v) for v in values[1:]]
        row.append('1' if self.valid else '0')
        return row

    def to_dict(self) -> Dict[str, Any]:
        rx, ry, rz, tx, ty, tz = self.euler()
        return {
            'id': self.id,
            'valid': self.valid,
            'status': self.status,
            'failure': self.failure,
            'matrix': None if self.transform is None else self.transform.to_matrix().tolist(),
            'euler_deg': {'rx': rx, 'ry': ry, 'rz': rz},
            'translation_m': {'tx': tx, 'ty': ty, 'tz': tz},
            'timings_s': {'coarse': self.coarse_s, 'fine': self.fine_s},
            'iterations': self.iterations,
            'converged': self.converged,
            'coarse_inliers': self.coarse_inliers,
            'planar_fraction': self.planar_fraction,
            'errors_m': {'x': self.err_x, 'y': self.err_y, 'z': self.err_z, 'mean': self.err_mean},
            'patch_errors_m': self.patch_errors,
            'time_span': [self.t_start, self.t_end],
            'point_count': self.point_count,
        }

    @classmethod
    def from_dict(cls, d: Dict[str, Any]) -> "FragmentRecord":
        matrix = d.get('matrix')
        errors = d.get('errors_m', {})
        timings = d.get('timings_s', {})
        span = d.get('time_span') or [None, None]
        return cls(
            id=int(d['id']),
            transform=None if matrix is None else RigidTransform.from_matrix(np.array(matrix)),
            valid=bool(d.get('valid')),
            coarse_s=float(timings.get('coarse', 0.0)),
            fine_s=float(timings.get('fine', 0.0)),
            iterations=int(d.get('iterations', 0)),
            converged=bool(d.get('converged')),
            coarse_inliers=int(d.get('coarse_inliers', 0)),
            planar_fraction=float(d.get('planar_fraction', 0.0)),
            err_x=errors.get('x'), err_y=errors.get('y'), err_z=errors.get('z'),
            err_mean=errors.get('mean'),
            t_start=span[0], t_end=span[1],
            point_count=int(d.get('point_count', 0)),
            status=d.get('status', ''),
            failure=d.get('failure'),
            patch_errors=list(d.get('patch_errors_m', [])),
        )


@dataclass
class RegistrationReport:
    fragments: List[FragmentRecord] = field(default_factory=list)
    overall_mean: Optional[float] = None
    fraction_below_2cm: Optional[float] = None
    meta: Dict[str, Any] = field(default_factory=dict)

    @property
    def failed(self) -> List[int]:
        return [f.id for f in self.fragments if not f.valid]

    def to_dict(self) -> Dict[str, Any]:
        return {
            'fragment_count': len(self.fragments),
            'failed': self.failed,
            'overall_mean_m': self.overall_mean,
            'fraction_below_2cm': self.fraction_below_2cm,
            'meta': self.meta,
            'fragments': [f.to_dict() for f in self.fragments],
        }


def _fmt(v) -> str:
    if v is None:
        return ''
    return repr(float(v))


def write_report(report: RegistrationReport, path: PathLike) -> Tuple[Path, Path]:
    """Write `<stem>.json` and `<stem>.csv` next to path."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    json_path = path.with_suffix('.json')
    csv_path = path.with_suffix('.csv')
    json_path.write_text(json.dumps(report.to_dict(), indent=2), encoding='utf-8')
    with open(csv_path, 'w', encoding='utf-8', newline='') as f:
        writer = csv.writer(f)
        writer.writerow(REPORT_COLUMNS)
        for record in report.fragments:
            writer.writerow(record.csv_row())
    return json_path, csv_path


def read_report(path: PathLike) -> RegistrationReport:
    data = json.loads(Path(path).with_suffix('.json').read_text(encoding='utf-8'))
    return RegistrationReport(
        fragments=[FragmentRecord.from_dict(d) for d in data.get('fragments', [])],
        overall_mean=data.get('overall_mean_m'),
        fraction_below_2cm=data.get('fraction_below_2cm'),
        meta=data.get('meta', {}),
    )


def read_report_csv(path: PathLike) -> List[Dict[str, Any]]:
    """Rows of the fragment CSV; empty cells become None."""
    rows = []
    with open(Path(path).with_suffix('.csv'), 'r', encoding='utf-8', newline='') as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != REPORT_COLUMNS:
            raise ValueError(f"{path}: unexpected CSV header {reader.fieldnames}")
        for raw in reader:
            row: Dict[str, Any] = {'id': int(raw['id']), 'valid': raw['valid'] == '1'}
            for key in REPORT_COLUMNS[1:-1]:
                row[key] = float(raw[key]) if raw[key] != '' else None
            rows.append(row)
    return rows
