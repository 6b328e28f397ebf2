#!/usr/bin/env python3
"""
MLSREG-KIT Config
Flat `section.key = value` pipeline configuration with env overrides.

Every stage owns its parameter dataclass; legal ranges sit next to the
fields as `metadata={"range": (lo, hi)}` or `metadata={"choices": (...)}`.
"""
import logging
import os
import typing
from dataclasses import dataclass, field, fields, is_dataclass, replace
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Tuple, Union

from coarse import CoarseParams
from drift import DriftParams
from evaluate import EvaluateParams
from fine import FineParams, GicpParams
from fragment import FragmentParams
from preprocess import PreprocessParams
from synth import SceneSpec

logger = logging.getLogger(__name__)

ENV_PREFIX = 'MLSREG_'
GICP_PREFIX = 'gicp_'
DEFAULT_CONFIG = Path(__file__).parent / 'configs' / 'pipeline.conf'


class ConfigError(ValueError):
    """Bad configuration entry; names the key and, for files, the line."""

    def __init__(self, message: str, key: str = '', line: Optional[int] = None, source: str = ''):
        where = ''
        if source:
            where = f" [{source}" + (f":{line}]" if line is not None else ']')
        super().__init__(f"{key}: {message}{where}" if key else f"{message}{where}")
        self.key = key
        self.line = line
        self.source = source


@dataclass
class RunParams:
    seed: int = field(default=0, metadata={"range": (0, 2**63 - 1)})
    jobs: int = field(default=1, metadata={"range": (1, 256)})
    write_fragments: bool = True
    evaluate: bool = True
    # false writes 0 s timings so repeated runs give byte-identical reports
    timings: bool = True


@dataclass
class PipelineConfig:
    pre: PreprocessParams = field(default_factory=PreprocessParams)
    frag: FragmentParams = field(default_factory=FragmentParams)
    coarse: CoarseParams = field(default_factory=CoarseParams)
    fine: FineParams = field(default_factory=FineParams)
    eval: EvaluateParams = field(default_factory=EvaluateParams)
    drift: DriftParams = field(default_factory=DriftParams)
    synth: SceneSpec = field(default_factory=SceneSpec)
    run: RunParams = field(default_factory=RunParams)

    @classmethod
    def load(cls, path: Optional[Union[str, Path]] = None, env: Optional[Dict[str, str]] = None) -> "PipelineConfig":
        """Defaults, then the file, then MLSREG_* environment overrides, then validation."""
        entries: Dict[str, Tuple[str, Optional[int], str]] = {}
        if path is not None:
            path = Path(path)
            if not path.exists():
                raise ConfigError(f"config file not found: {path}")
            entries.update(_parse(path.read_text(encoding='utf-8'), str(path)))
        entries.update(_env_entries(os.environ if env is None else env))
        config = cls()
        for key, (raw, line, source) in entries.items():
            config = config.with_value(key, raw, line, source)
        config.validate()
        return config

    def with_value(self, key: str, raw: Any, line: Optional[int] = None, source: str = '') -> "PipelineConfig":
        """Copy with one dotted key set; raw strings are coerced to the field type."""
        section, name = _split_key(key, line, source)
        params = getattr(self, section)
        target, attr = params, name
        if section == 'fine' and name.startswith(GICP_PREFIX):
            target, attr = params.gicp, name[len(GICP_PREFIX):]
        tp = _field_types(target).get(attr)
        if tp is None or is_dataclass(getattr(target, attr)):
            raise ConfigError("unknown key", key, line, source)
        value = _coerce(raw, tp, key, line, source) if isinstance(raw, str) else raw
        if target is params:
            return replace(self, **{section: replace(params, **{attr: value})})
        return replace(self, fine=replace(params, gicp=replace(target, **{attr: value})))

    def validate(self) -> None:
        for key, value, spec in self.items():
            _check_range(key, value, spec)
        # cross-field constraints
        if self.frag.max_span_fragments < 1:
            raise ConfigError("must be >= 1", 'frag.max_span_fragments')
        if self.eval.patch_radius_m >= self.fine.voxel_edge_m * 4:
            logger.warning("eval.patch_radius_m=%.2f is large relative to fine.voxel_edge_m=%.2f",
                           self.eval.patch_radius_m, self.fine.voxel_edge_m)

    def items(self) -> Iterable[Tuple[str, Any, Any]]:
        for section in fields(self):
            params = getattr(self, section.name)
            for spec in fields(params):
                value = getattr(params, spec.name)
                if is_dataclass(value):
                    for inner in fields(value):
                        yield f"{section.name}.{spec.name}_{inner.name}", getattr(value, inner.name), inner
                else:
                    yield f"{section.name}.{spec.name}", value, spec

    def dump(self) -> str:
        lines = ["# effective configuration"]
        current = None
        for key, value, _ in self.items():
            section = key.split('.', 1)[0]
            if section != current:
                lines.append('')
                current = section
            lines.append(f"{key} = {_render(value)}")
        return '\n'.join(lines) + '\n'

    def with_run_overrides(self, seed: Optional[int] = None, jobs: Optional[int] = None) -> "PipelineConfig":
        run = self.run
        if seed is not None:
            run = replace(run, seed=seed)
        if jobs is not None:
            run = replace(run, jobs=jobs)
        config = replace(self, run=run)
        config.validate()
        return config


# ============================================================================
#  PARSING
# ============================================================================

def _parse(text: str, source: str) -> Dict[str, Tuple[str, Optional[int], str]]:
    entries: Dict[str, Tuple[str, Optional[int], str]] = {}
    for lineno, line in enumerate(text.split('\n'), 1):
        line_stripped = line.split('#', 1)[0].strip()
        if not line_stripped:
            continue
        if '=' not in line_stripped:
            raise ConfigError(f"expected 'section.key = value', got {line_stripped!r}",
                              line=lineno, source=source)
        key, raw = (part.strip() for part in line_stripped.split('=', 1))
        if key in entries:
            raise ConfigError(f"duplicate key (first on line {entries[key][1]})", key, lineno, source)
        entries[key] = (raw, lineno, source)
    return entries


def _env_entries(env: Dict[str, str]) -> Dict[str, Tuple[str, Optional[int], str]]:
    """MLSREG_<SECTION>_<KEY> variables for known sections; other MLSREG_* names are ignored."""
    sections = {f.name for f in fields(PipelineConfig)}
    entries = {}
    for name in sorted(env):
        if not name.startswith(ENV_PREFIX):
            continue
        rest = name[len(ENV_PREFIX):].lower()
        section, _, key = rest.partition('_')
        if section in sections and key:
            entries[f"{section}.{key}"] = (env[name], None, f"env {name}")
    return entries


def _split_key(key: str, line: Optional[int], source: str) -> Tuple[str, str]:
    section, dot, name = key.partition('.')
    if not dot or section not in {f.name for f in fields(PipelineConfig)}:
        raise ConfigError("unknown key", key, line, source)
    return section, name


def _field_types(params) -> Dict[str, Any]:
    hints = typing.get_type_hints(type(params))
    return {spec.name: hints.get(spec.name, spec.type) for spec in fields(params)}


def _coerce(raw: str, tp, key: str, line: Optional[int], source: str):
    text = raw.strip()
    try:
        if tp is bool:
            lowered = text.lower()
            if lowered in ('true', 'yes', 'on', '1'):
                return True
            if lowered in ('false', 'no', 'off', '0'):
                return False
            raise ValueError(text)
        if tp is int:
            return int(text)
        if tp is float:
            return float(text)
        if tp is str:
            return text.strip('"\'')
        if typing.get_origin(tp) is tuple:
            inner = typing.get_args(tp)[0]
            items = [v.strip() for v in text.strip('[](){}').split(',') if v.strip()]
            return tuple(inner(v) for v in items)
    except ValueError:
        raise ConfigError(f"cannot parse {raw!r} as {getattr(tp, '__name__', tp)}", key, line, source) from None
    raise ConfigError(f"unsupported field type {tp}", key, line, source)


def _check_range(key: str, value, spec) -> None:
    meta = spec.metadata
    if 'range' in meta:
        lo, hi = meta['range']
        values = value if isinstance(value, tuple) else (value,)
        for v in values:
            if not lo <= v <= hi:
                raise ConfigError(f"value {v} outside [{lo}, {hi}]", key)
    if 'choices' in meta and value not in meta['choices']:
        raise ConfigError(f"value {value!r} not one of {meta['choices']}", key)


def _render(value) -> str:
    if isinstance(value, bool):
        return 'true' if value else 'false'
    if isinstance(value, tuple):
        return ', '.join(str(v) for v in value)
    return str(value)


def load_config(path: Optional[Union[str, Path]] = None) -> PipelineConfig:
    return PipelineConfig.load(path)


def config_keys() -> List[str]:
    return [key for key, _, _ in PipelineConfig().items()]


__all__ = ['ConfigError', 'PipelineConfig', 'RunParams', 'GicpParams', 'load_config', 'config_keys']
