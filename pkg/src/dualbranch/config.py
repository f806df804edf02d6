"""Run configuration and dataset manifest.

A run is described by one JSON document with the sections below. Every
section is optional in the file; missing keys take their defaults and
unknown keys are rejected so typos fail loudly.

    {
      "paths":     {"out": "run", "scenes": null, "checkpoint": null},
      "dataset":   {"count": 16, "version": "1"},
      "generator": {... GeneratorConfig fields ...},
      "sampling":  {"n": 32, "near": null, "far": null},
      "model":     {... ModelSpec fields ...},
      "train":     {... TrainConfig fields ...},
      "sampler":   {"kind": "ddim", "steps": 20, "eta": 0.0, "guidance": 2.0},
      "verify":    {"ors_cases": 100, ...},
      "seed": 0
    }

The config hash covers only what determines the data and the network shape
(dataset, generator, sampling, model, seed). Paths and optimisation settings
can change between a run and its resumption.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, List, Optional

from .diffusion.model import ModelSpec
from .diffusion.sample import SamplerConfig
from .diffusion.train import TrainConfig
from .diffusion.unet import UNetSpec
from .ors import SamplingPlan
from .scene.generator import GeneratorConfig
from .scene.types import OccupancyGrid

HASHED_SECTIONS = ("dataset", "generator", "sampling", "model", "seed")


class ConfigError(ValueError):
    """Malformed or inconsistent configuration."""


def _strict(cls, doc: Any, section: str):
    if not isinstance(doc, dict):
        raise ConfigError(f"{section}: expected an object")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(doc) - known)
    if unknown:
        raise ConfigError(f"{section}: unknown keys {unknown}")
    return doc


@dataclass
class Paths:
    out: str = "run"
    scenes: Optional[str] = None
    checkpoint: Optional[str] = None

    def scenes_dir(self) -> Path:
        return Path(self.scenes) if self.scenes else Path(self.out) / "scenes"

    def checkpoint_file(self) -> Path:
        return Path(self.checkpoint) if self.checkpoint else Path(self.out) / "checkpoint.dckp"

    def metrics_log(self) -> Path:
        return Path(self.out) / "metrics.log"


@dataclass
class DatasetConfig:
    count: int = 16
    version: str = "1"


@dataclass
class PlanConfig:
    """ORS sampling plan; a null near/far is derived from the scene grid."""

    n: int = 32
    near: Optional[float] = None
    far: Optional[float] = None

    def plan_for(self, grid: OccupancyGrid) -> SamplingPlan:
        auto = SamplingPlan.for_grid(grid, self.n)
        return SamplingPlan(self.n, auto.near if self.near is None else self.near, auto.far if self.far is None else self.far)


@dataclass
class VerifyConfig:
    ors_cases: int = 100
    merge_scenes: int = 50
    gate_inputs: int = 1000
    gradcheck: bool = True
    schedule_draws: int = 100000


@dataclass
class RunConfig:
    paths: Paths = field(default_factory=Paths)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    sampling: PlanConfig = field(default_factory=PlanConfig)
    model: ModelSpec = field(default_factory=ModelSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    verify: VerifyConfig = field(default_factory=VerifyConfig)
    seed: int = 0

    @classmethod
    def from_dict(cls, doc: Dict[str, Any]) -> "RunConfig":
        _strict(cls, doc, "config")
        try:
            model_doc = dict(_strict(ModelSpec, doc.get("model", {}), "model"))
            if "unet" in model_doc:
                model_doc["unet"] = UNetSpec(**_strict(UNetSpec, model_doc["unet"], "model.unet"))
            cfg = cls(
                paths=Paths(**_strict(Paths, doc.get("paths", {}), "paths")),
                dataset=DatasetConfig(**_strict(DatasetConfig, doc.get("dataset", {}), "dataset")),
                generator=GeneratorConfig.from_dict(_strict(GeneratorConfig, doc.get("generator", {}), "generator")),
                sampling=PlanConfig(**_strict(PlanConfig, doc.get("sampling", {}), "sampling")),
                model=ModelSpec(**model_doc),
                train=TrainConfig(**_strict(TrainConfig, doc.get("train", {}), "train")),
                sampler=SamplerConfig(**_strict(SamplerConfig, doc.get("sampler", {}), "sampler")),
                verify=VerifyConfig(**_strict(VerifyConfig, doc.get("verify", {}), "verify")),
                seed=doc.get("seed", 0),
            )
        except ConfigError:
            raise
        except (TypeError, ValueError, KeyError) as exc:
            raise ConfigError(str(exc)) from exc
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if not isinstance(self.seed, int) or isinstance(self.seed, bool) or not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be an integer in [0, 2^64)")
        if not isinstance(self.dataset.count, int) or self.dataset.count < 0:
            raise ConfigError("dataset.count must be a non-negative integer")
        if self.sampling.n != self.model.ors_samples:
            raise ConfigError(f"sampling.n ({self.sampling.n}) must equal model.ors_samples ({self.model.ors_samples})")
        U, V = self.generator.image_size
        if U % 4 or V % 4:
            raise ConfigError(f"image size {self.generator.image_size} must be divisible by 4")
        try:
            self.generator.validate()
        except ValueError as exc:
            raise ConfigError(f"generator: {exc}") from exc

    def to_dict(self) -> Dict[str, Any]:
        return {
            "paths": asdict(self.paths),
            "dataset": asdict(self.dataset),
            "generator": self.generator.to_dict(),
            "sampling": asdict(self.sampling),
            "model": self.model.to_dict(),
            "train": self.train.to_dict(),
            "sampler": self.sampler.to_dict(),
            "verify": asdict(self.verify),
            "seed": self.seed,
        }

    def canonical(self) -> str:
        return canonical_json(self.to_dict())

    def config_hash(self) -> str:
        doc = self.to_dict()
        return hashlib.sha256(canonical_json({k: doc[k] for k in HASHED_SECTIONS}).encode()).hexdigest()


def canonical_json(doc: Any) -> str:
    return json.dumps(doc, sort_keys=True, separators=(",", ":"), allow_nan=False)


def load_config(path) -> RunConfig:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
    return RunConfig.from_dict(doc)


@dataclass
class Manifest:
    version: str
    count: int
    seeds: List[int]
    files: List[str]
    config_hash: str

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: Dict[str, Any]) -> "Manifest":
        _strict(cls, doc, "manifest")
        m = cls(**doc)
        if len(m.seeds) != m.count or len(m.files) != m.count:
            raise ConfigError("manifest: seed and file lists must have `count` entries")
        return m

    def write(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n")

    @classmethod
    def read(cls, path) -> "Manifest":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except (json.JSONDecodeError, TypeError) as exc:
            raise ConfigError(f"{path}: malformed manifest ({exc})") from exc


def scene_seeds(seed: int, count: int) -> List[int]:
    """Per-scene seeds are ``seed + index`` so a dataset can be extended without reshuffling."""
    return [seed + i for i in range(count)]
