"""Run configuration: a JSON document validated against a schema before anything runs."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import jsonschema

from .model import ModelConfig
from .oracles import ShapeOracle, from_dict, parse
from .trainer import TrainConfig

_INT = {"type": "integer", "minimum": 1}
_NUM = {"type": "number", "minimum": 0}
_ORACLE = {"oneOf": [{"type": "string"}, {"type": "object", "required": ["kind"]}]}

SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["model", "train", "data"],
    "properties": {
        "model": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "kind": {"enum": ["triplane", "voxel"]},
                "R": _INT, "d": _INT, "L": _INT, "K": _INT, "heads": _INT, "k_conv": _INT,
            },
        },
        "train": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "epochs": _INT, "batch_size": _INT, "M": _INT, "N": _INT, "seed": {"type": "integer"},
                "lr": _NUM, "lr_min": _NUM, "noise_sigma": _NUM, "near_sigma": _NUM,
                "near_fraction": {"type": "number", "minimum": 0, "maximum": 1},
                "clip": {"type": "boolean"}, "clip_norm": {"type": "number", "exclusiveMinimum": 0},
                "prefetch": {"type": "boolean"},
            },
        },
        "data": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "oracle": _ORACLE,
                "oracles": {"type": "array", "items": _ORACLE, "minItems": 1},
                "points": {"type": "string"},
            },
            "minProperties": 1,
            "maxProperties": 1,
        },
        "output": {"type": "string"},
        "float64": {"type": "boolean"},
    },
}


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    model: ModelConfig
    train: TrainConfig
    data: dict
    output: str = "runs/default"
    float64: bool = False
    raw: dict = field(default_factory=dict, repr=False, compare=False)

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        try:
            jsonschema.validate(doc, SCHEMA)
        except jsonschema.ValidationError as exc:
            where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
            raise ConfigError(f"config invalid at {where}: {exc.message}") from None
        try:
            model = ModelConfig.from_dict(doc["model"])
            train = TrainConfig.from_dict(doc["train"])
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        return cls(model, train, dict(doc["data"]), doc.get("output", "runs/default"),
                   bool(doc.get("float64", False)), doc)

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        return cls.from_dict(doc)

    def to_dict(self) -> dict:
        return {"model": self.model.to_dict(), "train": self.train.to_dict(), "data": dict(self.data),
                "output": self.output, "float64": self.float64}

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def oracles(self) -> list[ShapeOracle]:
        if "points" in self.data:
            raise ConfigError("training needs occupancy labels; use an oracle, a point file only works for reconstruct")
        items = self.data.get("oracles") or [self.data["oracle"]]
        return [resolve_oracle(o) for o in items]


def resolve_oracle(item) -> ShapeOracle:
    try:
        return parse(item) if isinstance(item, str) else from_dict(item)
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"bad oracle description {item!r}: {exc}") from None
