"""Pipeline configuration: TOML file + programmatic defaults.

Unknown keys are rejected so a typo cannot silently fall back to a
default.  All stage randomness derives from the single global seed via
derive_seed.
"""

from __future__ import annotations

import zlib
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

try:
    import tomllib as _toml
except ImportError:                      # Python < 3.11
    import tomli as _toml

from .errors import ConfigError


def derive_seed(base_seed: int, *names: str) -> int:
    """Stable per-stage seed from the global seed and a name path."""
    entropy = (int(base_seed),) + tuple(
        zlib.crc32(n.encode("utf-8")) for n in names)
    return int(np.random.SeedSequence(entropy).generate_state(1, np.uint64)[0])


@dataclass(frozen=True)
class SynthSection:
    control: int = 20
    drought: int = 20
    severity_min: float = 0.5
    severity_max: float = 1.0
    leaf_count: int = 8
    points_per_leaf: int = 1100
    ground_points: int = 5200
    pot_points: int = 700
    stem_points: int = 220


@dataclass(frozen=True)
class SegmentSection:
    r_voxel: float = 0.0          # absolute voxel size; 0 derives from resolution
    voxel_factor: float = 2.0
    seed_factor: float = 10.0
    w_color: float = 0.2
    w_spatial: float = 0.4
    w_feature: float = 1.0
    min_occupied: int = 3
    exg_threshold: float = 0.1


@dataclass(frozen=True)
class DescribeSection:
    support_factor: float = 8.0
    keypoint_spacing_factor: float = 4.0
    keypoint_method: str = "uniform"


@dataclass(frozen=True)
class EncodeSection:
    gmm_k: int = 16
    bovw_k: int = 64
    max_train_descriptors: int = 20000


@dataclass(frozen=True)
class NetworkSection:
    n_points: int = 1024
    pretrain_per_class: int = 12
    pretrain_epochs: int = 30
    finetune_epochs: int = 30
    lr: float = 0.01
    batch: int = 8
    lam: float = 0.001
    momentum: float = 0.9


@dataclass(frozen=True)
class SvmSection:
    c: float = 1.0
    epochs: int = 1000


@dataclass(frozen=True)
class SplitSection:
    n_train: int = 24


_SECTIONS = {
    "synth": SynthSection,
    "segment": SegmentSection,
    "describe": DescribeSection,
    "encode": EncodeSection,
    "network": NetworkSection,
    "svm": SvmSection,
    "split": SplitSection,
}


@dataclass(frozen=True)
class PipelineConfig:
    seed: int = 0
    out: str = "runs/out"
    synth: SynthSection = field(default_factory=SynthSection)
    segment: SegmentSection = field(default_factory=SegmentSection)
    describe: DescribeSection = field(default_factory=DescribeSection)
    encode: EncodeSection = field(default_factory=EncodeSection)
    network: NetworkSection = field(default_factory=NetworkSection)
    svm: SvmSection = field(default_factory=SvmSection)
    split: SplitSection = field(default_factory=SplitSection)

    def out_dir(self) -> Path:
        return Path(self.out)


def _coerce(section: str, name: str, expected_type, value):
    if expected_type is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{section}.{name}: expected a number, "
                              f"got {value!r}")
        return float(value)
    if expected_type is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{section}.{name}: expected an integer, "
                              f"got {value!r}")
        return value
    if expected_type is str:
        if not isinstance(value, str):
            raise ConfigError(f"{section}.{name}: expected a string, "
                              f"got {value!r}")
        return value
    raise ConfigError(f"{section}.{name}: unsupported type")


def _build_section(name: str, cls, data: dict):
    if not isinstance(data, dict):
        raise ConfigError(f"{name}: expected a table of keys")
    known = {f.name: f.type for f in fields(cls)}
    type_map = {"int": int, "float": float, "str": str}
    unknown = set(data) - set(known)
    if unknown:
        raise ConfigError(f"unknown key {name}.{sorted(unknown)[0]}")
    kwargs = {}
    for key, value in data.items():
        t = known[key]
        t = type_map.get(t, t) if isinstance(t, str) else t
        kwargs[key] = _coerce(name, key, t, value)
    return cls(**kwargs)


def config_from_dict(data: dict) -> PipelineConfig:
    if not isinstance(data, dict):
        raise ConfigError("config root must be a table")
    top_known = {"seed", "out"} | set(_SECTIONS)
    unknown = set(data) - top_known
    if unknown:
        raise ConfigError(f"unknown key {sorted(unknown)[0]}")
    kwargs = {}
    if "seed" in data:
        kwargs["seed"] = _coerce("top-level", "seed", int, data["seed"])
    if "out" in data:
        kwargs["out"] = _coerce("top-level", "out", str, data["out"])
    for name, cls in _SECTIONS.items():
        if name in data:
            kwargs[name] = _build_section(name, cls, data[name])
    config = PipelineConfig(**kwargs)
    validate_config(config)
    return config


def load_config(path) -> PipelineConfig:
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            data = _toml.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}")
    except _toml.TOMLDecodeError as exc:
        raise ConfigError(f"invalid TOML in {path}: {exc}")
    return config_from_dict(data)


def validate_config(config: PipelineConfig) -> None:
    c = config
    checks = [
        (c.synth.control >= 1, "synth.control must be >= 1"),
        (c.synth.drought >= 1, "synth.drought must be >= 1"),
        (0.5 <= c.synth.severity_min <= c.synth.severity_max <= 1.0,
         "synth severities must satisfy 0.5 <= min <= max <= 1.0"),
        (c.synth.leaf_count >= 3, "synth.leaf_count must be >= 3"),
        (min(c.synth.points_per_leaf, c.synth.ground_points,
             c.synth.pot_points, c.synth.stem_points) >= 50,
         "synth point counts must be >= 50"),
        (c.segment.r_voxel >= 0, "segment.r_voxel must be >= 0"),
        (c.segment.voxel_factor > 0, "segment.voxel_factor must be > 0"),
        (c.segment.seed_factor > 1, "segment.seed_factor must be > 1"),
        (min(c.segment.w_color, c.segment.w_spatial,
             c.segment.w_feature) >= 0, "segment weights must be >= 0"),
        (c.segment.min_occupied >= 1, "segment.min_occupied must be >= 1"),
        (c.describe.support_factor > 0,
         "describe.support_factor must be > 0"),
        (c.describe.keypoint_spacing_factor > 0,
         "describe.keypoint_spacing_factor must be > 0"),
        (c.describe.keypoint_method in ("uniform", "iss"),
         "describe.keypoint_method must be 'uniform' or 'iss'"),
        (c.encode.gmm_k >= 2, "encode.gmm_k must be >= 2"),
        (c.encode.bovw_k >= 2, "encode.bovw_k must be >= 2"),
        (c.encode.max_train_descriptors >= c.encode.bovw_k,
         "encode.max_train_descriptors too small"),
        (c.network.n_points >= 8, "network.n_points must be >= 8"),
        (c.network.pretrain_per_class >= 2,
         "network.pretrain_per_class must be >= 2"),
        (c.network.pretrain_epochs >= 0 and c.network.finetune_epochs >= 0,
         "network epochs must be >= 0"),
        (c.network.lr > 0, "network.lr must be > 0"),
        (c.network.batch >= 1, "network.batch must be >= 1"),
        (c.network.lam >= 0, "network.lam must be >= 0"),
        (0 <= c.network.momentum < 1, "network.momentum must be in [0, 1)"),
        (c.svm.c > 0, "svm.c must be > 0"),
        (c.svm.epochs >= 1, "svm.epochs must be >= 1"),
        (c.split.n_train >= 2, "split.n_train must be >= 2"),
        (c.seed >= 0, "seed must be >= 0"),
    ]
    for ok, message in checks:
        if not ok:
            raise ConfigError(message)


def config_to_toml(config: PipelineConfig) -> str:
    """Render a config back to TOML text (used to snapshot runs)."""
    lines = [f"seed = {config.seed}", f'out = "{config.out}"', ""]
    for name in _SECTIONS:
        lines.append(f"[{name}]")
        for key, value in asdict(getattr(config, name)).items():
            if isinstance(value, str):
                lines.append(f'{key} = "{value}"')
            elif isinstance(value, float):
                lines.append(f"{key} = {value!r}")
            else:
                lines.append(f"{key} = {value}")
        lines.append("")
    return "\n".join(lines)
