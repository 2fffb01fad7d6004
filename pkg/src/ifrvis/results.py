"""Results file: per-video predicted instances with run-length encoded masks, as JSON."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .data import rle_decode, rle_encode
from .metrics import Instance

RESULTS_VERSION = 1


class ResultsFormatError(ValueError):
    pass


def encode_instance(inst: Instance) -> dict:
    return {
        "instance_id": int(inst.track_id),
        "category_id": int(inst.category),
        "confidence": float(inst.score),
        "masks": [rle_encode(m).tolist() for m in np.asarray(inst.masks, dtype=bool)],
    }


def decode_instance(entry: dict, frame_shape: tuple) -> Instance:
    masks = np.stack([rle_decode(np.asarray(r, dtype=np.uint32), frame_shape) for r in entry["masks"]]) if entry["masks"] else np.zeros((0,) + frame_shape, bool)
    return Instance(int(entry["category_id"]), masks, float(entry["confidence"]), int(entry["instance_id"]))


def results_document(videos: Sequence[Sequence[Instance]], frame_shapes: Sequence[tuple], config: Optional[dict] = None) -> dict:
    return {
        "format_version": RESULTS_VERSION,
        "config": config or {},
        "videos": [
            {"index": i, "frame_shape": list(shape), "instances": [encode_instance(x) for x in insts]}
            for i, (insts, shape) in enumerate(zip(videos, frame_shapes))
        ],
    }


def write_results(path, videos: Sequence[Sequence[Instance]], frame_shapes: Sequence[tuple], config: Optional[dict] = None) -> None:
    Path(path).write_text(json.dumps(results_document(videos, frame_shapes, config)))


def parse_results(doc: dict) -> list:
    if doc.get("format_version") != RESULTS_VERSION:
        raise ResultsFormatError(f"unsupported results version {doc.get('format_version')!r}")
    try:
        return [[decode_instance(e, tuple(v["frame_shape"])) for e in v["instances"]] for v in doc["videos"]]
    except (KeyError, TypeError, ValueError) as e:
        raise ResultsFormatError(f"malformed results document: {e}") from None


def read_results(path) -> list:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ResultsFormatError(f"{path} is not valid JSON: {e}") from None
    return parse_results(doc)
