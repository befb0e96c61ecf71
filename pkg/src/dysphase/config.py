"""Run configuration read from a TOML file.

Every section is optional and every field defaults to the classification
setup, so an empty file reproduces the reference configuration. Unknown
sections or keys are rejected.
"""
from __future__ import annotations

import os
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .corpus import SynthSpec
from .experiment import CVConfig, ModelConfig
from .featurizer import FeatureConfig, SegmenterParams
from .neuralnet import TrainConfig
from .spectral import MgdParams, StftParams


class ConfigError(ValueError):
    pass


@dataclass
class GammatoneSettings:
    n_bands: int = 81
    fmin: float = 50.0
    fmax: float = 7800.0


@dataclass
class FeatureSettings:
    normalization: str = "segment"
    workers: int = 1


@dataclass
class PathSettings:
    corpus_dir: str = "corpus"
    manifest: str = ""  # defaults to <corpus_dir>/manifest.csv
    cache_dir: str = "cache"
    out_dir: str = "out"


@dataclass
class RunConfig:
    stft: StftParams = field(default_factory=StftParams)
    mgd: MgdParams = field(default_factory=MgdParams)
    gammatone: GammatoneSettings = field(default_factory=GammatoneSettings)
    segmenter: SegmenterParams = field(default_factory=SegmenterParams)
    features: FeatureSettings = field(default_factory=FeatureSettings)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    cv: CVConfig = field(default_factory=CVConfig)
    synth: SynthSpec = field(default_factory=SynthSpec)
    paths: PathSettings = field(default_factory=PathSettings)

    def feature_config(self) -> FeatureConfig:
        g = self.gammatone
        return FeatureConfig(self.stft, self.mgd, g.n_bands, g.fmin, g.fmax, self.segmenter,
                             self.features.normalization)

    @property
    def manifest_path(self) -> Path:
        if self.paths.manifest:
            return Path(self.paths.manifest)
        return Path(self.paths.corpus_dir) / "manifest.csv"


def _build(cls, table: dict, where: str):
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(table) - set(known))
    if unknown:
        raise ConfigError(f"unknown key(s) in [{where}]: {', '.join(unknown)}")
    kw = {}
    for name, value in table.items():
        default = getattr(cls(), name)
        if isinstance(default, bool) or not isinstance(value, type(default)):
            # ints are accepted for float fields; lists stay lists
            if not (isinstance(default, float) and isinstance(value, int) and not isinstance(value, bool)):
                raise ConfigError(f"[{where}] {name}: expected {type(default).__name__}, got {value!r}")
            value = float(value)
        kw[name] = value
    try:
        return cls(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{where}] {exc}") from exc


def config_from_dict(data: dict) -> RunConfig:
    sections = {f.name: f for f in fields(RunConfig)}
    unknown = sorted(set(data) - set(sections))
    if unknown:
        raise ConfigError(f"unknown section(s): {', '.join(unknown)}")
    kw = {}
    for name, table in data.items():
        if not isinstance(table, dict):
            raise ConfigError(f"[{name}] must be a table")
        kw[name] = _build(type(getattr(RunConfig(), name)), table, name)
    return RunConfig(**kw)


def load_config(path=None, env=None) -> RunConfig:
    """Read ``path`` (or defaults when ``None``) and apply environment
    overrides: ``DYSPHASE_OUT_DIR`` and ``DYSPHASE_WORKERS``."""
    env = os.environ if env is None else env
    data: dict = {}
    if path is not None:
        try:
            with open(path, "rb") as fh:
                data = tomllib.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    cfg = config_from_dict(data)
    if env.get("DYSPHASE_OUT_DIR"):
        cfg.paths.out_dir = env["DYSPHASE_OUT_DIR"]
    if env.get("DYSPHASE_WORKERS"):
        try:
            workers = int(env["DYSPHASE_WORKERS"])
        except ValueError:
            raise ConfigError(f"DYSPHASE_WORKERS must be an integer, got {env['DYSPHASE_WORKERS']!r}") from None
        if workers < 1:
            raise ConfigError("DYSPHASE_WORKERS must be >= 1")
        cfg.cv.workers = workers
        cfg.features.workers = workers
    return cfg
