"""Pipeline configuration file (TOML).

Schema, every key optional::

    dataset_root = "/data/gazecapture"     # GAZEKIT_DATA overrides
    manifest_path = "out/manifest.jsonl"
    output_dir = "out"
    workers = 4

    [filters]
    require_face_valid = true
    require_eyes_valid = true
    mobile_only = true
    portrait_only = true
    phone_allow = ["iphone"]
    deny = ["ipad", "ipod"]

    [split]
    strategy = "mit"                       # or "google"
    seed = 0
    ratios = [0.731, 0.102, 0.167]

    [gazenet]                              # any GazeNetConfig field
    crop_size = 128
    [gazenet.schedule]
    initial_lr = 0.016

    [personalize]
    method = "svr"                         # or "affine"
    variants = ["0.7:shuffle", "2/3:shuffle", "0.7:noshuffle", "cal13"]
    folds = 3
    seed = 0
    top_users = 10
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .errors import ConfigError
from .gazenet.config import GazeNetConfig
from .splits import GOOGLE_RATIOS, FilterSpec

ENV_DATA = "GAZEKIT_DATA"


@dataclass
class SplitConfig:
    strategy: str = "mit"
    seed: int = 0
    ratios: tuple = GOOGLE_RATIOS

    def __post_init__(self):
        if self.strategy not in ("mit", "google"):
            raise ConfigError(f"split.strategy must be 'mit' or 'google', got {self.strategy!r}")
        self.ratios = tuple(float(r) for r in self.ratios)


@dataclass
class PersonalizeConfig:
    method: str = "svr"
    variants: tuple = ("0.7:shuffle",)
    folds: int = 3
    seed: int = 0
    top_users: int = 10

    def __post_init__(self):
        if self.method not in ("svr", "affine"):
            raise ConfigError(f"personalize.method must be 'svr' or 'affine', got {self.method!r}")
        if self.folds not in (3, 5):
            raise ConfigError(f"personalize.folds must be 3 or 5, got {self.folds}")
        self.variants = tuple(self.variants)


@dataclass
class PipelineConfig:
    dataset_root: str = ""
    manifest_path: str = "manifest.jsonl"
    output_dir: str = "."
    workers: int = 0  # 0 = all available cores
    filters: FilterSpec = field(default_factory=FilterSpec.standard)
    split: SplitConfig = field(default_factory=SplitConfig)
    gazenet: GazeNetConfig = field(default_factory=GazeNetConfig)
    personalize: PersonalizeConfig = field(default_factory=PersonalizeConfig)

    def resolved_root(self):
        return os.environ.get(ENV_DATA) or self.dataset_root

    def resolved_workers(self):
        return self.workers if self.workers > 0 else (os.cpu_count() or 1)


def _section(cls, data, prefix, base=None):
    if not isinstance(data, dict):
        raise ConfigError(f"[{prefix}] must be a table")
    known = {f.name for f in fields(cls)}
    bad = sorted(set(data) - known)
    if bad:
        raise ConfigError(f"unknown config key(s): {', '.join(prefix + '.' + k for k in bad)}")
    try:
        return replace(base, **data) if base is not None else cls(**data)
    except TypeError as exc:
        raise ConfigError(f"[{prefix}]: {exc}") from exc


def from_dict(data):
    top = {f.name for f in fields(PipelineConfig)}
    bad = sorted(set(data) - top)
    if bad:
        raise ConfigError(f"unknown config key(s): {', '.join(bad)}")
    kw = {k: data[k] for k in ("dataset_root", "manifest_path", "output_dir", "workers") if k in data}
    if "filters" in data:
        f = dict(data["filters"])
        for k in ("phone_allow", "deny"):
            if k in f:
                f[k] = tuple(f[k])
        kw["filters"] = _section(FilterSpec, f, "filters", base=FilterSpec.standard())
    if "split" in data:
        kw["split"] = _section(SplitConfig, data["split"], "split")
    if "gazenet" in data:
        try:
            kw["gazenet"] = GazeNetConfig.from_dict(data["gazenet"])
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"[gazenet]: {exc}") from exc
    if "personalize" in data:
        kw["personalize"] = _section(PersonalizeConfig, data["personalize"], "personalize")
    for k in ("dataset_root", "manifest_path", "output_dir"):
        if k in kw and not isinstance(kw[k], str):
            raise ConfigError(f"{k} must be a path string")
    return PipelineConfig(**kw)


def load_config(path=None):
    """Read a TOML config; with no path the defaults are returned."""
    if path is None:
        return PipelineConfig()
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = tomllib.loads(path.read_text(encoding="utf-8"))
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return from_dict(data)
