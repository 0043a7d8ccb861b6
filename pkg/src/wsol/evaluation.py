"""Localization metrics and the augmentation x batch x depth experiment matrix."""
from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from threadpoolctl import threadpool_limits

from .augment import POLICIES
from .boxes import BBox, iou
from .cam import compute_cam, localize
from .model import ModelConfig, build_network, forward
from .train import TrainConfig, TrainingDivergedError, fit, images_to_batch

POLICY_LABELS = {
    "none": "CAM",
    "hns": "HnS",
    "gr": "GR (Proposed)",
    "gr_then_hns": "HnS after GR",
    "hns_then_gr": "GR after HnS",
}
VARIANT_ORDER = ("res34", "res18", "toy10")
VARIANT_LABELS = {"res34": "ResNet34", "res18": "ResNet18", "toy10": "Toy10"}
METRICS = (("gt_known_loc", "GT-known Loc"), ("top1_loc", "Top-1 Loc"), ("top1_clas", "Top-1 Clas"))

__all__ = ["iou", "SampleResult", "MetricsReport", "evaluate", "evaluate_network", "run_matrix"]


@dataclass
class SampleResult:
    sample_id: int
    true_class: int
    predicted_class: int
    bbox_top1: BBox
    bbox_gtknown: BBox
    iou_top1: float
    iou_gtknown: float

    def to_dict(self):
        d = asdict(self)
        d["bbox_top1"] = list(self.bbox_top1.as_tuple())
        d["bbox_gtknown"] = list(self.bbox_gtknown.as_tuple())
        return d


def _pct(k, n):
    return round(100.0 * k / n, 2)


@dataclass
class MetricsReport:
    n_samples: int
    gt_known_count: int
    top1_loc_count: int
    top1_clas_count: int
    per_class: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    @property
    def gt_known_loc(self):
        return _pct(self.gt_known_count, self.n_samples)

    @property
    def top1_loc(self):
        return _pct(self.top1_loc_count, self.n_samples)

    @property
    def top1_clas(self):
        return _pct(self.top1_clas_count, self.n_samples)

    def as_tuple(self):
        return (self.gt_known_loc, self.top1_loc, self.top1_clas)

    def to_dict(self):
        return {
            "gt_known_loc": self.gt_known_loc,
            "top1_loc": self.top1_loc,
            "top1_clas": self.top1_clas,
            "n_samples": self.n_samples,
            "counts": {"gt_known_loc": self.gt_known_count, "top1_loc": self.top1_loc_count,
                       "top1_clas": self.top1_clas_count},
            "per_class": self.per_class,
            "config": self.config,
        }

    def table(self):
        width = max(len(label) for _, label in METRICS)
        return "\n".join(f"{label:<{width}}  {getattr(self, key):6.2f}" for key, label in METRICS)


def _counts(results):
    gt = sum(r.iou_gtknown > 0.5 for r in results)
    loc = sum(r.iou_top1 > 0.5 and r.predicted_class == r.true_class for r in results)
    clas = sum(r.predicted_class == r.true_class for r in results)
    return gt, loc, clas


def evaluate(results, config=None) -> MetricsReport:
    """GT-known Loc, Top-1 Loc and Top-1 Clas; IoU must exceed 0.5 strictly."""
    results = list(results)
    if not results:
        raise ValueError("evaluate needs at least one sample result")
    per_class = {}
    for c in sorted({r.true_class for r in results}):
        sub = [r for r in results if r.true_class == c]
        gt, loc, clas = _counts(sub)
        per_class[str(c)] = {"n": len(sub), "gt_known_loc": _pct(gt, len(sub)),
                             "top1_loc": _pct(loc, len(sub)), "top1_clas": _pct(clas, len(sub))}
    gt, loc, clas = _counts(results)
    return MetricsReport(len(results), gt, loc, clas, per_class, dict(config or {}))


def evaluate_network(net, samples, threshold_frac=0.2, connectivity=8, chunk=64):
    """Run the Top-1 and GT-known localization paths on every sample."""
    results = []
    side = net.config.input_side
    w = net.classifier_w
    with threadpool_limits(1):
        for start in range(0, len(samples), chunk):
            part = samples[start:start + chunk]
            logits, feats = forward(net, images_to_batch([s.image for s in part]), "eval")
            for j, s in enumerate(part):
                pred = int(np.argmax(logits[j]))
                box_top1 = localize(compute_cam(feats[j], w[:, pred]), side, threshold_frac, connectivity)
                if pred == s.label:
                    box_gt = box_top1
                else:
                    box_gt = localize(compute_cam(feats[j], w[:, s.label]), side, threshold_frac, connectivity)
                results.append(SampleResult(start + j, s.label, pred, box_top1, box_gt,
                                            iou(box_top1, s.gt_box), iou(box_gt, s.gt_box)))
    return results


CALIBRATION_GRID = tuple(round(0.05 * k, 2) for k in range(1, 17))


def calibrate_threshold(net, samples, grid=CALIBRATION_GRID, connectivity=8):
    """Pick the threshold fraction with the best GT-known Loc on ``samples``.

    Meant for a one-off baseline run on training data; the winner is then
    frozen.  Ties go to the smaller threshold.  Returns (best, {thr: score}).
    """
    scores = {}
    for thr in grid:
        scores[thr] = evaluate(evaluate_network(net, samples, thr, connectivity)).gt_known_loc
    best = max(grid, key=lambda t: (scores[t], -t))
    return best, scores


# -- experiment matrix ------------------------------------------------------

def _run_cell(args):
    train, test, policy, batch, variant, seed, train_cfg, eval_opts, input_side = args
    num_classes = int(max(s.label for s in train)) + 1
    net = build_network(ModelConfig(variant, num_classes, input_side), init_seed=seed)
    cfg = replace(train_cfg, batch_size=batch, seed=seed,
                  augment=replace(train_cfg.augment, policy=policy))
    cell = {"policy": policy, "batch_size": batch, "variant": variant, "seed": seed}
    try:
        trained, log = fit(net, train, cfg)
    except TrainingDivergedError as exc:
        return {**cell, "status": "diverged", "error": str(exc)}
    report = evaluate(evaluate_network(trained, test, **eval_opts))
    return {**cell, "status": "ok", "final_loss": log[-1]["mean_loss"] if log else None,
            **{k: getattr(report, k) for k, _ in METRICS}}


def run_matrix(train, test, policies=POLICIES, batch_sizes=(32, 128, 256), variants=("res34", "res18"),
               seeds=(0,), train_cfg: TrainConfig | None = None, eval_opts=None, workers=1):
    """Train and evaluate one network per (policy, batch, variant, seed) cell.

    Cells are independent and individually seeded, so the report does not
    depend on ``workers``.
    """
    train_cfg = train_cfg or TrainConfig()
    eval_opts = dict(eval_opts or {})
    for p in policies:
        if p not in POLICIES:
            raise ValueError(f"unknown policy {p!r}")
    input_side = train[0].image.shape[0]
    jobs = [(train, test, p, b, v, s, train_cfg, eval_opts, input_side)
            for p in policies for b in batch_sizes for v in variants for s in seeds]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            cells = list(pool.map(_run_cell, jobs))
    else:
        cells = [_run_cell(j) for j in jobs]
    return assemble_report(cells, policies, batch_sizes, variants, seeds,
                           {"train": asdict(train_cfg), "eval": eval_opts})


def _mean(values):
    return round(float(np.mean(values)), 2) if values else None


def assemble_report(cells, policies, batch_sizes, variants, seeds, config):
    policies = [p for p in POLICIES if p in policies]
    variants = sorted(variants, key=lambda v: VARIANT_ORDER.index(v))
    batch_sizes = sorted(batch_sizes)
    ok = [c for c in cells if c["status"] == "ok"]

    def pick(metric, **where):
        return [c[metric] for c in ok if all(c[k] == v for k, v in where.items())]

    table1_batch = max(batch_sizes)
    table1 = {v: {m: {p: _mean(pick(m, policy=p, variant=v, batch_size=table1_batch)) for p in policies}
                  for m, _ in METRICS} for v in variants}
    table2 = {p: {str(b): {v: _mean(pick("top1_loc", policy=p, variant=v, batch_size=b)) for v in variants}
                  for b in batch_sizes} for p in policies}
    return {
        "policies": policies,
        "batch_sizes": batch_sizes,
        "variants": variants,
        "seeds": list(seeds),
        "table1_batch_size": table1_batch,
        "table1": table1,
        "table2": table2,
        "cells": cells,
        "diverged": [c for c in cells if c["status"] != "ok"],
        "config": config,
    }


def _fmt(v):
    return "   n/a" if v is None else f"{v:6.2f}"


def format_matrix(report):
    """Plain-text tables laid out like the paper's augmentation and batch tables."""
    policies, variants = report["policies"], report["variants"]
    heads = [POLICY_LABELS[p] for p in policies]
    mw = max(len(label) for _, label in METRICS)
    lines = [f"Table 1: localization metrics by augmentation (batch {report['table1_batch_size']})"]
    lines.append(f"{'Depth':<9} {'Metric':<{mw}} | " + " | ".join(f"{h:>13}" for h in heads))
    for v in variants:
        for i, (m, label) in enumerate(METRICS):
            name = VARIANT_LABELS[v] if i == 0 else ""
            vals = " | ".join(f"{_fmt(report['table1'][v][m][p]):>13}" for p in policies)
            lines.append(f"{name:<9} {label:<{mw}} | {vals}")
    lines.append("")
    lines.append("Table 2: Top-1 Loc by batch size and depth")
    lines.append(f"{'Method':<14} {'Batch size':>10} | " + " | ".join(f"{VARIANT_LABELS[v]:>9}" for v in variants))
    for p in policies:
        for i, b in enumerate(report["batch_sizes"]):
            name = POLICY_LABELS[p] if i == 0 else ""
            vals = " | ".join(f"{_fmt(report['table2'][p][str(b)][v]):>9}" for v in variants)
            lines.append(f"{name:<14} {b:>10} | {vals}")
    return "\n".join(lines)


def worker_count():
    """Worker cap from WSOL_THREADS (default 1)."""
    try:
        return max(1, int(os.environ.get("WSOL_THREADS", "1")))
    except ValueError:
        return 1
