"""Experiment configuration and run manifests.

Configs are plain JSON objects parsed strictly: unknown keys anywhere in
the tree are rejected so typos never silently fall back to defaults.  The
manifest written at the end of a run records the config hash, code version,
seed, timestamps, and a digest of every emitted file.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import time
from dataclasses import dataclass, field

from .data import SyntheticDomainSpec
from .model import ModelConfig
from .stability import PerturbationSpec
from .training import TrainConfig


class ConfigError(ValueError):
    """Malformed experiment configuration."""


@dataclass
class RouterSettings:
    """Variant-independent routing knobs applied when routers are attached."""
    train_samples: int = 1
    eval_samples: int = 35
    kl_weight: float = 0.1
    dropout_rate: float = 0.1
    global_temperature: float = 0.7

    def __post_init__(self):
        if self.train_samples < 1 or self.eval_samples < 1:
            raise ConfigError("sample counts must be >= 1")
        if self.kl_weight < 0:
            raise ConfigError("kl_weight must be >= 0")


@dataclass
class DataConfig:
    num_classes: int = 4
    modes_per_class: int = 2
    feature_dim: int = 16
    mean_scale: float = 0.35
    noise_scale: float = 0.5
    rotation_angle: float = 0.0
    delta_near: float = 1.0
    delta_far: float = 3.0
    n_train: int = 2000
    n_val: int = 200
    n_test: int = 500
    n_ood: int = 500
    seed: int | None = None      # defaults to the experiment seed

    def domain_spec(self, fallback_seed: int) -> SyntheticDomainSpec:
        return SyntheticDomainSpec(
            num_classes=self.num_classes, modes_per_class=self.modes_per_class,
            feature_dim=self.feature_dim, mean_scale=self.mean_scale,
            noise_scale=self.noise_scale, rotation_angle=self.rotation_angle,
            seed=self.seed if self.seed is not None else fallback_seed)


@dataclass
class ExperimentConfig:
    seed: int = 0
    out_dir: str = "runs/exp"
    variants: list = field(default_factory=lambda: ["map"])
    layers: object = "auto"          # "auto" or explicit list of block indices
    auto_top_k: int = 2
    model: ModelConfig = field(default_factory=ModelConfig)
    router: RouterSettings = field(default_factory=RouterSettings)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    perturbation: PerturbationSpec = field(default_factory=PerturbationSpec)

    def __post_init__(self):
        from .routers import VARIANTS
        for v in self.variants:
            if v not in VARIANTS:
                raise ConfigError(f"unknown variant {v!r}")
        if self.layers != "auto":
            if not isinstance(self.layers, (list, tuple)) or not all(
                    isinstance(i, int) for i in self.layers):
                raise ConfigError("layers must be 'auto' or a list of ints")
            self.layers = list(self.layers)
        if self.auto_top_k < 1:
            raise ConfigError("auto_top_k must be >= 1")


_NESTED = {"model": ModelConfig, "router": RouterSettings, "train": TrainConfig,
           "data": DataConfig, "perturbation": PerturbationSpec}


def _strict_build(cls, payload: dict, path: str):
    if not isinstance(payload, dict):
        raise ConfigError(f"{path or 'config'} must be an object")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(payload) - names
    if unknown:
        where = f"{path}." if path else ""
        raise ConfigError(f"unknown key {where}{sorted(unknown)[0]}")
    kwargs = {}
    for key, value in payload.items():
        sub = _NESTED.get(key)
        if cls is ExperimentConfig and sub is not None:
            kwargs[key] = _strict_build(sub, value, key)
        elif key == "gamma_levels" and isinstance(value, list):
            kwargs[key] = tuple(value)
        else:
            kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {path or 'config'}: {exc}") from exc


def config_from_dict(payload: dict) -> ExperimentConfig:
    return _strict_build(ExperimentConfig, payload, "")


def load_config(path) -> ExperimentConfig:
    with open(path, encoding="utf-8") as fh:
        try:
            payload = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
    return config_from_dict(payload)


def config_to_dict(cfg: ExperimentConfig) -> dict:
    out = dataclasses.asdict(cfg)
    out["perturbation"]["gamma_levels"] = list(out["perturbation"]["gamma_levels"])
    return out


def config_hash(cfg: ExperimentConfig) -> str:
    canonical = json.dumps(config_to_dict(cfg), sort_keys=True)
    return hashlib.sha256(canonical.encode()).hexdigest()


# --------------------------------------------------------------------------
# run manifest
# --------------------------------------------------------------------------


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class RunManifest:
    config_hash: str
    code_version: str
    seed: int
    started_at: float
    finished_at: float = 0.0
    files: list = field(default_factory=list)

    def add_file(self, path) -> None:
        self.files.append({"path": os.path.basename(str(path)),
                           "sha256": file_sha256(path)})

    def finish(self) -> None:
        self.finished_at = time.time()

    def to_json_dict(self) -> dict:
        return dataclasses.asdict(self)


def write_manifest(manifest: RunManifest, path) -> None:
    """Write atomically: a partial manifest never appears on disk."""
    tmp = str(path) + ".tmp"
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(manifest.to_json_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)
