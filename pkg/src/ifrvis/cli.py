"""Command line entry point: ``ifrvis generate|train|infer|eval|ablate``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import jsonschema

from . import experiments
from .config import ConfigError, RunConfig, load_config, parse_config
from .data import DatasetFormatError, InfeasibleSpecError, generate_dataset, read_dataset, write_dataset
from .metrics import MetricsReport, evaluate
from .inference import ground_truth_instances, prediction_instances
from .results import ResultsFormatError, read_results, write_results
from .tensor_io import TensorFormatError
from .trainer import CheckpointError, NumericError, Trainer, load_checkpoint

logger = logging.getLogger("ifrvis")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

LOG_COLUMNS = ("step", "total", "cls", "mask", "dice", "mask_cross", "dice_cross", "grad_norm")

_unit = {"type": "number", "minimum": 0, "maximum": 1}
REPORT_SCHEMA = {
    "type": "object",
    "required": ["metrics", "config"],
    "properties": {
        "config": {"type": "object"},
        "metrics": {
            "type": "object",
            "required": ["AP", "AP50", "AP75", "AR1", "AR10", "IDF1", "IDP", "IDR", "MOTA", "IDs", "per_class_AP"],
            "properties": {
                **{k: _unit for k in ("AP", "AP50", "AP75", "AR1", "AR10", "IDF1", "IDP", "IDR")},
                "MOTA": {"type": "number", "maximum": 1},
                "IDs": {"type": "integer", "minimum": 0},
                "per_class_AP": {"type": "object", "additionalProperties": _unit},
                "counts": {"type": "object"},
            },
        },
    },
}


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else parse_config({})
    if args.seed is not None:
        cfg = cfg.with_overrides(train={"seed": args.seed}, model={"seed": args.seed}, data={"seed": args.seed})
    return cfg


def _dataset(cfg: RunConfig, path: Optional[str]) -> list:
    if path:
        return read_dataset(path)
    if "path" in cfg.raw.get("data", {}) or "generator" in cfg.raw.get("data", {}):
        return experiments.training_set(cfg)
    raise ConfigError("no dataset: pass --data or set data.path / data.generator in the config")


def cmd_generate(args) -> int:
    cfg = _config(args)
    data = cfg.section("data")
    samples = generate_dataset(cfg.generator, data["count"], data["seed"])
    out = args.out or "dataset.ifrd"
    write_dataset(out, samples)
    n_inst = sum(len(s.categories) for s in samples)
    print(f"wrote {len(samples)} videos ({n_inst} instances) to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    samples = _dataset(cfg, args.data)
    out = Path(args.out or "model.ckpt")
    log_path = Path(args.log) if args.log else out.with_suffix(".log.csv")
    trainer = Trainer(cfg.model, cfg.train, cfg.loss, samples)
    if args.resume and out.exists():
        trainer.restore(load_checkpoint(out))
        print(f"resumed from {out} at step {trainer.step}")
    with open(log_path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=LOG_COLUMNS, extrasaction="ignore")
        writer.writeheader()
        writer.writerows(trainer.log)

        def on_step(step, br):
            writer.writerow(br)
            if step % 100 == 0:
                f.flush()
                logger.info("step %d loss %.4f", step, br["total"])

        ck = trainer.run(checkpoint_path=out, on_step=on_step)
    last = ck.log[-1]["total"] if ck.log else float("nan")
    print(f"trained to step {ck.step}, final loss {last:.4f}; checkpoint {out}, log {log_path}")
    return EXIT_OK


def cmd_infer(args) -> int:
    cfg = _config(args)
    if not args.checkpoint:
        raise ConfigError("infer needs --checkpoint")
    model = load_checkpoint(args.checkpoint).build_model()
    samples = _dataset(cfg, args.data)
    infer = cfg.section("infer")
    if args.mode:
        infer["mode"] = args.mode
    ev = cfg.section("eval")
    stride = cfg.output_stride
    preds = [
        prediction_instances(experiments.predict(model, v, infer, output_stride=stride), ev["score_threshold"], ev["mask_threshold"])
        for v in samples
    ]
    out = args.out or "results.json"
    shapes = [tuple(d // stride for d in v.frames.shape[1:3]) for v in samples]
    write_results(out, preds, shapes, {"run": cfg.to_dict(), "infer": infer, "output_stride": stride})
    print(f"wrote predictions for {len(samples)} videos to {out}")
    return EXIT_OK


def report_document(report: MetricsReport, config: dict) -> dict:
    doc = {"metrics": report.to_dict(), "config": config}
    jsonschema.validate(doc, REPORT_SCHEMA)
    return doc


def cmd_eval(args) -> int:
    cfg = _config(args)
    if not args.results:
        raise ConfigError("eval needs --results")
    preds = read_results(args.results)
    samples = _dataset(cfg, args.data)
    if len(preds) != len(samples):
        raise DatasetFormatError(f"results cover {len(preds)} videos but the dataset has {len(samples)}")
    stride = cfg.output_stride
    gts = [ground_truth_instances(v, stride) for v in samples]
    for p, g in zip(preds, gts):
        if p and g and p[0].masks.shape != g[0].masks.shape:
            raise DatasetFormatError(
                f"result masks {p[0].masks.shape} do not match ground truth {g[0].masks.shape}; check eval.resolution"
            )
    report = evaluate(preds, gts, cfg.section("eval")["iou_thresh"])
    doc = report_document(report, cfg.to_dict())
    out = Path(args.out or "report.json")
    out.write_text(json.dumps(doc, indent=1))
    metrics = {k: v for k, v in doc["metrics"].items() if k not in ("per_class_AP", "counts")}
    experiments.write_csv(out.with_suffix(".csv"), [metrics])
    print(" ".join(f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}" for k, v in metrics.items()))
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _config(args)
    ab = cfg.section("ablate")
    lambda_es = [float(x) for x in args.lambda_e.split(",")] if args.lambda_e else ab["lambda_e"]
    seeds = [int(x) for x in args.seeds.split(",")] if args.seeds else ab["seeds"]
    out = Path(args.out or "ablation")
    cells = out / "cells"
    if not args.resume and cells.exists() and any(cells.iterdir()):
        print(f"{cells} already holds results; pass --resume to continue it", file=sys.stderr)
        return EXIT_CONFIG
    report = experiments.ablate(cfg, out, lambda_es, seeds)
    for row in report["summary"]:
        print(f"lambda_e={row['lambda_e']:g} AP={row['AP_mean']:.4f}+-{row['AP_std']:.4f} (n={row['n']})")
    return EXIT_OK


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "infer": cmd_infer, "eval": cmd_eval, "ablate": cmd_ablate}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ifrvis", description="Recurrent-query video instance segmentation on synthetic videos.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", help="run configuration JSON")
        s.add_argument("--out", help="output path")
        s.add_argument("--seed", type=int, help="override train/model/data seeds")
        s.add_argument("--resume", action="store_true", help="continue from existing outputs")
        if name in ("train", "infer", "eval"):
            s.add_argument("--data", help="IFRD dataset file (default: from config)")
        if name == "train":
            s.add_argument("--log", help="training log CSV (default: next to checkpoint)")
        if name == "infer":
            s.add_argument("--checkpoint")
            s.add_argument("--mode", choices=["video", "clip", "tta"])
        if name == "eval":
            s.add_argument("--results")
        if name == "ablate":
            s.add_argument("--lambda-e", help="comma separated lambda_e values")
            s.add_argument("--seeds", help="comma separated seeds")
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, InfeasibleSpecError, CheckpointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DatasetFormatError, ResultsFormatError, TensorFormatError, OSError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
