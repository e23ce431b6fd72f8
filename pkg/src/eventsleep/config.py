"""TOML run configuration. Every key is optional; unknown keys are an error.

Example::

    seed = 0
    profile = "desk"

    [encoder]
    k_slow = 1.6
    k_fast = 1.0

    [thresholds]
    tau_snr = 8.0

    [grid]
    k_values = [0.6, 1.0, 1.6]

    [model]
    window_radius = 15

    [train]
    max_epochs = 50

    [cv]
    n_folds = 5

    [ablation]
    dense_input = false

    [paths]
    out = "out"
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .encoder import EncoderConfig
from .exceptions import ParameterError
from .network import ModelConfig
from .operating_point import FidelityThresholds, SweepGrid
from .training import TrainConfig


@dataclass(frozen=True)
class CvConfig:
    n_folds: int = 5
    val_fraction: float = 0.15


@dataclass(frozen=True)
class AblationConfig:
    dense_input: bool = False
    single_branch: bool = False
    no_elif: bool = False


@dataclass(frozen=True)
class PathsConfig:
    out: str = "out"


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    profile: str = "desk"
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    thresholds: FidelityThresholds = field(default_factory=FidelityThresholds)
    grid: SweepGrid = field(default_factory=SweepGrid)
    model: dict = field(default_factory=dict)  # ModelConfig overrides on top of the profile
    train: TrainConfig = field(default_factory=TrainConfig)
    cv: CvConfig = field(default_factory=CvConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def model_config(self) -> ModelConfig:
        a = self.ablation
        return ModelConfig.from_profile(
            self.profile,
            **{**self.model, "dense_input": a.dense_input, "single_branch": a.single_branch, "no_elif": a.no_elif},
        )

    def train_config(self) -> TrainConfig:
        return replace(self.train, seed=self.seed)


_SECTIONS = {
    "encoder": EncoderConfig,
    "thresholds": FidelityThresholds,
    "grid": SweepGrid,
    "train": TrainConfig,
    "cv": CvConfig,
    "ablation": AblationConfig,
    "paths": PathsConfig,
}
_MODEL_KEYS = {f.name for f in fields(ModelConfig)} - {"profile", "dense_input", "single_branch", "no_elif"}
_TUPLE_FIELDS = {"k_values", "kernel_sizes", "class_weights"}


def _build(cls, section: str, table) -> object:
    if not isinstance(table, dict):
        raise ParameterError(f"[{section}] must be a table")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(table) - known)
    if unknown:
        raise ParameterError(f"unknown key(s) in [{section}]: {', '.join(unknown)}")
    kw = {k: tuple(v) if k in _TUPLE_FIELDS and isinstance(v, list) else v for k, v in table.items()}
    try:
        return cls(**kw)
    except TypeError as exc:
        raise ParameterError(f"[{section}]: {exc}") from None


def parse_config(data: dict) -> RunConfig:
    top = {"seed", "profile", "model", *_SECTIONS}
    unknown = sorted(set(data) - top)
    if unknown:
        raise ParameterError(f"unknown top-level key(s): {', '.join(unknown)}")
    kw: dict = {}
    if "seed" in data:
        if not isinstance(data["seed"], int) or isinstance(data["seed"], bool):
            raise ParameterError("seed must be an integer")
        kw["seed"] = data["seed"]
    if "profile" in data:
        kw["profile"] = str(data["profile"])
    for name, cls in _SECTIONS.items():
        if name in data:
            kw[name] = _build(cls, name, data[name])
    if "model" in data:
        m = data["model"]
        if not isinstance(m, dict):
            raise ParameterError("[model] must be a table")
        bad = sorted(set(m) - _MODEL_KEYS)
        if bad:
            raise ParameterError(f"unknown key(s) in [model]: {', '.join(bad)}")
        kw["model"] = {k: tuple(v) if k in _TUPLE_FIELDS else v for k, v in m.items()}
    cfg = RunConfig(**kw)
    cfg.model_config()  # validate early
    return cfg


def load_config(path) -> RunConfig:
    p = Path(path)
    try:
        with open(p, "rb") as fh:
            data = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ParameterError(f"{p}: {exc}") from None
    return parse_config(data)


def with_overrides(cfg: RunConfig, **kw) -> RunConfig:
    """Apply CLI flag overrides; ``None`` values are ignored."""
    kw = {k: v for k, v in kw.items() if v is not None}
    abl = {k: kw.pop(k) for k in ("dense_input", "single_branch", "no_elif") if k in kw}
    if abl:
        cfg = replace(cfg, ablation=replace(cfg.ablation, **{k: v or getattr(cfg.ablation, k) for k, v in abl.items()}))
    if "out" in kw:
        cfg = replace(cfg, paths=PathsConfig(str(kw.pop("out"))))
    cfg = replace(cfg, **kw)
    cfg.model_config()
    return cfg


def to_dict(cfg: RunConfig) -> dict:
    return dataclasses.asdict(cfg)
