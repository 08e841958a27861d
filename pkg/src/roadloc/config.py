"""Pipeline configuration: one JSON document with a section per component."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math

from .embedding import TrainSchedule
from .experiments import BenchmarkConfig
from .geoworld import GpsNoiseModel, WorldConfig

SECTIONS = {
    "world": WorldConfig,
    "benchmark": BenchmarkConfig,
    "train": TrainSchedule,
    "gps": GpsNoiseModel,
}


@dataclasses.dataclass(frozen=True)
class PipelineConfig:
    world: WorldConfig = dataclasses.field(default_factory=WorldConfig)
    benchmark: BenchmarkConfig = dataclasses.field(default_factory=BenchmarkConfig)
    train: TrainSchedule = dataclasses.field(default_factory=TrainSchedule)
    gps: GpsNoiseModel = dataclasses.field(default_factory=GpsNoiseModel)

    @classmethod
    def from_dict(cls, doc: dict) -> "PipelineConfig":
        unknown = set(doc) - set(SECTIONS)
        if unknown:
            raise ValueError(f"unknown config sections {sorted(unknown)}")
        parts = {}
        for name, kind in SECTIONS.items():
            values = dict(doc.get(name, {}))
            fields = {f.name for f in dataclasses.fields(kind)}
            bad = set(values) - fields
            if bad:
                raise ValueError(f"unknown keys in [{name}]: {sorted(bad)}")
            for k, v in values.items():
                if isinstance(v, list):
                    values[k] = _tuplify(v)
            parts[name] = kind(**values)
        return cls(**parts)

    def to_dict(self) -> dict:
        return {name: _listify(dataclasses.asdict(getattr(self, name))) for name in SECTIONS}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    def sha256(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()


def load_config(path) -> PipelineConfig:
    with open(path) as fh:
        return PipelineConfig.from_dict(json.load(fh))


def _tuplify(v):
    return tuple(_tuplify(x) for x in v) if isinstance(v, list) else v


def _listify(v):
    if isinstance(v, dict):
        return {k: _listify(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_listify(x) for x in v]
    if isinstance(v, float) and not math.isfinite(v):
        raise ValueError("config values must be finite")
    return v
