"""Train/evaluate cells for seed sweeps and the cross-frame loss weight ablation."""

from __future__ import annotations

import csv
import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .config import RunConfig, parse_config
from .data import generate_dataset, read_dataset
from .inference import ground_truth_instances, infer_video, per_clip_infer, prediction_instances, tta_infer
from .metrics import evaluate
from .trainer import Trainer, load_checkpoint, save_checkpoint

logger = logging.getLogger(__name__)

CELL_METRICS = ("AP", "AP50", "AP75", "AR1", "AR10", "IDF1", "IDP", "IDR", "MOTA", "IDs")


def training_set(cfg: RunConfig, seed: Optional[int] = None) -> list:
    data = cfg.section("data")
    if "path" in data:
        return read_dataset(data["path"])
    return generate_dataset(cfg.generator, data["count"], data["seed"] if seed is None else seed)


def validation_set(cfg: RunConfig) -> list:
    data = cfg.section("data")
    return generate_dataset(cfg.generator, data["val_count"], data["val_seed"])


def predict(model, video, infer: dict, mode: Optional[str] = None, output_stride: int = 1):
    mode = mode or infer["mode"]
    if mode == "video":
        return infer_video(model, video, output_stride)
    if mode == "clip":
        return per_clip_infer(model, video, infer["clip_len"], infer["overlap"], output_stride)
    if mode == "tta":
        return tta_infer(model, video, infer["scales"], output_stride=output_stride)
    raise ValueError(f"unknown inference mode {mode!r}")


def evaluate_model(model, videos: Sequence, cfg: RunConfig, mode: Optional[str] = None, scales=None) -> dict:
    infer = cfg.section("infer")
    if scales is not None:
        infer = dict(infer, scales=list(scales))
    ev = cfg.section("eval")
    stride = cfg.output_stride
    preds = [
        prediction_instances(predict(model, v, infer, mode, stride), ev["score_threshold"], ev["mask_threshold"])
        for v in videos
    ]
    report = evaluate(preds, [ground_truth_instances(v, stride) for v in videos], ev["iou_thresh"])
    return {k: getattr(report, k) for k in CELL_METRICS}


def cell_name(lambda_e: float, seed: int, recurrent: bool = True) -> str:
    return f"{'ifr' if recurrent else 'noifr'}_le{lambda_e:g}_s{seed}"


def run_cell(
    cfg: RunConfig,
    lambda_e: float,
    seed: int,
    recurrent: bool = True,
    cell_dir=None,
    tta_scales: Optional[Sequence[float]] = None,
    train_data: Optional[list] = None,
    val_data: Optional[list] = None,
) -> dict:
    """Train one (lambda_e, seed, variant) cell and evaluate it; cached as JSON under ``cell_dir``."""
    name = cell_name(lambda_e, seed, recurrent)
    result_path = Path(cell_dir) / f"{name}.json" if cell_dir else None
    if result_path is not None and result_path.exists():
        return json.loads(result_path.read_text())
    cell_cfg = cfg.with_overrides(
        model={"recurrent": recurrent, "seed": seed}, loss={"lambda_e": lambda_e}, train={"seed": seed}
    )
    train_data = training_set(cell_cfg) if train_data is None else train_data
    val_data = validation_set(cell_cfg) if val_data is None else val_data
    trainer = Trainer(cell_cfg.model, cell_cfg.train, cell_cfg.loss, train_data)
    ck_path = Path(cell_dir) / f"{name}.ckpt" if cell_dir else None
    if ck_path is not None and ck_path.exists():
        trainer.restore(load_checkpoint(ck_path))
    trainer.run(checkpoint_path=ck_path)
    row = {"cell": name, "lambda_e": lambda_e, "seed": seed, "recurrent": recurrent, "steps": trainer.step}
    row.update(evaluate_model(trainer.model, val_data, cell_cfg, mode="video"))
    if tta_scales:
        tta = evaluate_model(trainer.model, val_data, cell_cfg, mode="tta", scales=tta_scales)
        row.update({f"tta_{k}": v for k, v in tta.items()})
    row["final_loss"] = float(np.mean([r["total"] for r in trainer.log[-50:]])) if trainer.log else float("nan")
    if result_path is not None:
        result_path.write_text(json.dumps(row, indent=1))
    logger.info("cell %s done: AP %.4f IDF1 %.4f IDs %d", name, row["AP"], row["IDF1"], row["IDs"])
    return row


def _cell_job(args) -> dict:
    raw, lambda_e, seed, recurrent, cell_dir, tta_scales = args
    return run_cell(parse_config(raw), lambda_e, seed, recurrent, cell_dir, tta_scales)


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("IFRVIS_THREADS", "1")))
    except ValueError:
        return 1


def run_cells(cfg: RunConfig, cells: Sequence[tuple], cell_dir, tta_scales=None) -> list:
    """Run ``(lambda_e, seed, recurrent)`` cells, in parallel processes if ``IFRVIS_THREADS`` > 1."""
    Path(cell_dir).mkdir(parents=True, exist_ok=True)
    jobs = [(cfg.to_dict(), le, s, rec, str(cell_dir), tta_scales) for le, s, rec in cells]
    workers = min(worker_count(), len(jobs))
    if workers <= 1:
        return [_cell_job(j) for j in jobs]
    with ProcessPoolExecutor(workers) as pool:
        return list(pool.map(_cell_job, jobs))


def sample_std(values: Sequence[float]) -> float:
    return float(np.std(values, ddof=1)) if len(values) > 1 else 0.0


def aggregate(rows: Sequence[dict], key: str = "lambda_e", metrics: Sequence[str] = ("AP",)) -> list:
    out = []
    for value in sorted({r[key] for r in rows}):
        group = [r for r in rows if r[key] == value]
        agg = {key: value, "n": len(group)}
        for m in metrics:
            vals = [float(r[m]) for r in group]
            agg[f"{m}_mean"] = float(np.mean(vals))
            agg[f"{m}_std"] = sample_std(vals)
        out.append(agg)
    return out


def write_csv(path, rows: Sequence[dict]) -> None:
    fields = list(rows[0]) if rows else []
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=fields)
        w.writeheader()
        w.writerows(rows)


def errorbar_svg(xs: Sequence[float], means: Sequence[float], stds: Sequence[float], xlabel: str, ylabel: str, title: str = "") -> str:
    """Standalone SVG plot of mean +- std error bars over categorical x positions."""
    W, H, pad = 480, 320, 56
    lo = min(m - s for m, s in zip(means, stds)) if means else 0.0
    hi = max(m + s for m, s in zip(means, stds)) if means else 1.0
    if not math.isfinite(lo) or not math.isfinite(hi) or hi - lo < 1e-9:
        lo, hi = lo - 0.5, hi + 0.5
    span = hi - lo
    lo, hi = lo - 0.1 * span, hi + 0.1 * span

    def ys(v):
        return H - pad - (v - lo) / (hi - lo) * (H - 2 * pad)

    def xs_(i):
        return pad + (i + 0.5) * (W - 2 * pad) / max(len(xs), 1)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">',
        '<rect width="100%" height="100%" fill="white"/>',
        f'<line x1="{pad}" y1="{H - pad}" x2="{W - pad}" y2="{H - pad}" stroke="black"/>',
        f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{H - pad}" stroke="black"/>',
        f'<text x="{W / 2}" y="{H - 12}" text-anchor="middle" font-size="13">{xlabel}</text>',
        f'<text x="16" y="{H / 2}" text-anchor="middle" font-size="13" transform="rotate(-90 16 {H / 2})">{ylabel}</text>',
    ]
    if title:
        parts.append(f'<text x="{W / 2}" y="22" text-anchor="middle" font-size="14">{title}</text>')
    for frac in (0.0, 0.5, 1.0):
        v = lo + frac * (hi - lo)
        parts.append(f'<text x="{pad - 6}" y="{ys(v) + 4:.1f}" text-anchor="end" font-size="10">{v:.3f}</text>')
    for i, (x, m, s) in enumerate(zip(xs, means, stds)):
        cx = xs_(i)
        parts.append(
            f'<line class="errorbar" data-mean="{m:.6g}" data-std="{s:.6g}" x1="{cx:.1f}" y1="{ys(m - s):.1f}" '
            f'x2="{cx:.1f}" y2="{ys(m + s):.1f}" stroke="steelblue" stroke-width="2"/>'
        )
        for y in (ys(m - s), ys(m + s)):
            parts.append(f'<line x1="{cx - 6:.1f}" y1="{y:.1f}" x2="{cx + 6:.1f}" y2="{y:.1f}" stroke="steelblue" stroke-width="2"/>')
        parts.append(f'<circle cx="{cx:.1f}" cy="{ys(m):.1f}" r="4" fill="darkred"/>')
        parts.append(f'<text x="{cx:.1f}" y="{H - pad + 16}" text-anchor="middle" font-size="11">{x:g}</text>')
    parts.append("</svg>")
    return "\n".join(parts)


def ablate(cfg: RunConfig, out_dir, lambda_es: Optional[Sequence[float]] = None, seeds: Optional[Sequence[int]] = None) -> dict:
    """Full lambda_e x seed sweep: per-cell CSV, aggregate CSV and an error-bar SVG under ``out_dir``."""
    ab = cfg.section("ablate")
    lambda_es = list(ab["lambda_e"] if lambda_es is None else lambda_es)
    seeds = list(ab["seeds"] if seeds is None else seeds)
    out = Path(out_dir)
    rows = run_cells(cfg, [(le, s, True) for le in lambda_es for s in seeds], out / "cells", ab.get("tta_scales"))
    metrics = [m for m in ("AP", "tta_AP", "IDF1", "IDs") if all(m in r for r in rows)]
    summary = aggregate(rows, "lambda_e", metrics)
    write_csv(out / "cells.csv", rows)
    write_csv(out / "ablation.csv", summary)
    svg = errorbar_svg(
        [r["lambda_e"] for r in summary],
        [r["AP_mean"] for r in summary],
        [r["AP_std"] for r in summary],
        "lambda_e",
        "mask AP (mean +- sample std)",
        f"cross-frame loss weight, {len(seeds)} seeds",
    )
    (out / "ablation.svg").write_text(svg)
    report = {"config": cfg.to_dict(), "lambda_e": lambda_es, "seeds": seeds, "summary": summary, "cells": rows}
    (out / "ablation.json").write_text(json.dumps(report, indent=1))
    return report
