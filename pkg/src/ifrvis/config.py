"""Run configuration: JSON document validated against a strict schema."""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import jsonschema

from .data import SHAPES, GeneratorSpec
from .encoder import STRIDE
from .losses import LossConfig
from .model import ModelConfig
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


_num = {"type": "number"}
_pos_int = {"type": "integer", "minimum": 1}
_nonneg_int = {"type": "integer", "minimum": 0}
_prob = {"type": "number", "minimum": 0, "maximum": 1}
_range = {"type": "array", "items": {"type": "number", "minimum": 0}, "minItems": 2, "maxItems": 2}


def _section(props: dict, required: tuple = ()) -> dict:
    return {"type": "object", "properties": props, "required": list(required), "additionalProperties": False}


GENERATOR_SCHEMA = _section(
    {
        "height": _pos_int,
        "width": _pos_int,
        "length": _pos_int,
        "min_instances": _pos_int,
        "max_instances": _pos_int,
        "shapes": {"type": "array", "items": {"enum": list(SHAPES)}, "minItems": 1, "uniqueItems": True},
        "size_range": _range,
        "speed_range": _range,
        "crossing_prob": _prob,
        "same_category_prob": _prob,
        "color_jitter": {"type": "number", "minimum": 0},
        "noise": {"type": "number", "minimum": 0},
    }
)

RUN_SCHEMA = _section(
    {
        "model": _section(
            {
                "queries": _pos_int,
                "dim": _pos_int,
                "heads": _pos_int,
                "layers": _pos_int,
                "encoder_channels": {"type": "array", "items": _pos_int, "minItems": 2, "maxItems": 2},
                "encoder_kernel": {"type": "integer", "minimum": 1},
                "recurrent": {"type": "boolean"},
                "num_classes": _pos_int,
                "seed": _nonneg_int,
            }
        ),
        "loss": _section(
            {
                "lambda_c": {"type": "number", "minimum": 0},
                "lambda_m": {"type": "number", "minimum": 0},
                "lambda_D": {"type": "number", "minimum": 0},
                "lambda_e": {"type": "number", "minimum": 0},
                "gamma": {"type": "number", "minimum": 0},
                "alpha": _prob,
            }
        ),
        "train": _section(
            {
                "steps": _nonneg_int,
                "batch": _pos_int,
                "clip_len": _pos_int,
                "lr": {"type": "number", "minimum": 0},
                "encoder_lr_mult": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                "seed": _nonneg_int,
                "grad_clip": {"type": "number", "minimum": 0},
                "lr_decay_step": _nonneg_int,
                "lr_decay_gamma": {"type": "number", "exclusiveMinimum": 0},
                "checkpoint_every": _nonneg_int,
            }
        ),
        "data": _section(
            {
                "path": {"type": "string"},
                "generator": GENERATOR_SCHEMA,
                "count": _nonneg_int,
                "seed": _nonneg_int,
                "val_count": _nonneg_int,
                "val_seed": _nonneg_int,
            }
        ),
        "eval": _section(
            {"iou_thresh": _prob, "score_threshold": _prob, "mask_threshold": _prob, "resolution": {"enum": ["feature", "input"]}}
        ),
        "infer": _section(
            {
                "mode": {"enum": ["video", "clip", "tta"]},
                "clip_len": {"type": "integer", "minimum": 2},
                "overlap": _pos_int,
                "scales": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0}, "minItems": 1},
            }
        ),
        "ablate": _section(
            {
                "lambda_e": {"type": "array", "items": {"type": "number", "minimum": 0}, "minItems": 1},
                "seeds": {"type": "array", "items": _nonneg_int, "minItems": 1},
                "tta_scales": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0}, "minItems": 1},
            }
        ),
    }
)

DEFAULTS: dict = {
    "data": {"count": 100, "seed": 0, "val_count": 100, "val_seed": 1},
    "eval": {"iou_thresh": 0.5, "score_threshold": 0.05, "mask_threshold": 0.5, "resolution": "feature"},
    "infer": {"mode": "video", "clip_len": 2, "overlap": 1, "scales": [1.0]},
    "ablate": {"lambda_e": [0.0, 0.1, 0.3, 0.5, 1.0], "seeds": [0, 1, 2, 3, 4], "tta_scales": [1.0, 0.75]},
}


@dataclass
class RunConfig:
    raw: dict

    @property
    def model(self) -> ModelConfig:
        m = dict(self.raw.get("model", {}))
        if "encoder_channels" in m:
            m["encoder_channels"] = tuple(m["encoder_channels"])
        return ModelConfig(**m)

    @property
    def loss(self) -> LossConfig:
        return LossConfig(**self.raw.get("loss", {}))

    @property
    def train(self) -> TrainConfig:
        return TrainConfig(**self.raw.get("train", {}))

    @property
    def generator(self) -> GeneratorSpec:
        return GeneratorSpec(**self.raw["data"].get("generator", {}))

    def section(self, name: str) -> dict:
        merged = dict(DEFAULTS.get(name, {}))
        merged.update(self.raw.get(name, {}))
        return merged

    @property
    def output_stride(self) -> int:
        return STRIDE if self.section("eval")["resolution"] == "feature" else 1

    def with_overrides(self, **sections) -> "RunConfig":
        raw = copy.deepcopy(self.raw)
        for name, values in sections.items():
            raw.setdefault(name, {}).update(values)
        return parse_config(raw)

    def to_dict(self) -> dict:
        return copy.deepcopy(self.raw)


def parse_config(doc: Any) -> RunConfig:
    """Validate ``doc`` and check that every section builds its typed config."""
    try:
        jsonschema.validate(doc, RUN_SCHEMA)
    except jsonschema.ValidationError as e:
        where = "/".join(str(p) for p in e.absolute_path) or "<root>"
        raise ConfigError(f"config error at {where}: {e.message}") from None
    cfg = RunConfig(copy.deepcopy(doc))
    try:
        cfg.model, cfg.loss, cfg.train
        if "generator" in cfg.raw.get("data", {}):
            cfg.generator.validate()
    except (ValueError, TypeError) as e:
        raise ConfigError(f"config error: {e}") from None
    infer = cfg.section("infer")
    if infer["overlap"] >= infer["clip_len"]:
        raise ConfigError("config error at infer: overlap must be smaller than clip_len")
    return cfg


def load_config(path) -> RunConfig:
    try:
        doc = json.loads(Path(path).read_text())
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"config {path} is not valid JSON: {e}") from None
    return parse_config(doc)
