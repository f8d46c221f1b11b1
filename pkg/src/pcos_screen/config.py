"""Run configuration: YAML in, validated dataclasses out, YAML snapshot back."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .dataset import PreprocessConfig, SplitSpec
from .errors import ConfigError
from .model import BACKBONE_SCHEDULES, WEIGHTS_DIR_ENV, BackboneSpec, TrainConfig

EXPLAIN_METHODS = ("gradcam", "lime", "shapley")
ENV_VARS = (WEIGHTS_DIR_ENV,)


@dataclass(frozen=True)
class ExplainDefaults:
    method: str = "gradcam"
    n_segments: int | None = None  # None: 16 for LIME, 9 for Shapley
    lime_samples: int = 1000
    kernel_width: float = 0.25
    seed: int = 0
    layer: str | None = None

    def __post_init__(self):
        if self.method not in EXPLAIN_METHODS:
            raise ConfigError(f"unknown explain method {self.method!r}; expected one of {EXPLAIN_METHODS}")

    def segments_for(self, method: str) -> int:
        if self.n_segments is not None:
            return self.n_segments
        return 9 if method == "shapley" else 16


@dataclass(frozen=True)
class RunConfig:
    data_root: str = "data"
    out_root: str = "runs"
    deterministic: bool = True
    backbone: BackboneSpec = field(default_factory=BackboneSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    split: SplitSpec = field(default_factory=SplitSpec)
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    explain: ExplainDefaults = field(default_factory=ExplainDefaults)
    environment: dict[str, str | None] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        blob = json.dumps({k: v for k, v in self.to_dict().items() if k != "environment"},
                          sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]


def _section(cls, raw: Any, name: str, **forced):
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"config section {name!r} must be a mapping")
    allowed = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in {name!r}: {', '.join(unknown)}")
    try:
        return cls(**{**raw, **forced})
    except TypeError as exc:
        raise ConfigError(f"invalid {name!r} section: {exc}") from exc


def resolve(raw: dict[str, Any] | None) -> RunConfig:
    """Validate a plain mapping into a :class:`RunConfig`; unknown keys are rejected."""
    raw = dict(raw or {})
    top = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = sorted(set(raw) - top)
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")

    backbone = _section(BackboneSpec, raw.get("backbone"), "backbone")
    train_raw = dict(raw.get("train") or {})
    max_epochs, patience = BACKBONE_SCHEDULES[backbone.kind]
    train_raw.setdefault("max_epochs", max_epochs)
    train_raw.setdefault("patience", min(patience, train_raw["max_epochs"]))
    train = _section(TrainConfig, train_raw, "train")
    split = _section(SplitSpec, raw.get("split"), "split")
    pre_raw = dict(raw.get("preprocess") or {})
    if "target_size" in pre_raw and pre_raw["target_size"] != backbone.input_size:
        raise ConfigError("preprocess.target_size must equal backbone.input_size")
    pre_raw.pop("target_size", None)
    preprocess = _section(PreprocessConfig, pre_raw, "preprocess", target_size=backbone.input_size)
    explain = _section(ExplainDefaults, raw.get("explain"), "explain")

    env = {k: os.environ.get(k) for k in ENV_VARS}
    return RunConfig(
        data_root=str(raw.get("data_root", RunConfig.data_root)),
        out_root=str(raw.get("out_root", RunConfig.out_root)),
        deterministic=bool(raw.get("deterministic", True)),
        backbone=backbone, train=train, split=split, preprocess=preprocess,
        explain=explain, environment=env,
    )


def load_config(path: str | Path | None, **overrides) -> RunConfig:
    raw: dict[str, Any] = {}
    if path is not None:
        try:
            raw = yaml.safe_load(Path(path).read_text()) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
    raw.pop("environment", None)
    raw.update({k: v for k, v in overrides.items() if v is not None})
    return resolve(raw)


def write_snapshot(config: RunConfig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(yaml.safe_dump(config.to_dict(), sort_keys=False))
    return path
