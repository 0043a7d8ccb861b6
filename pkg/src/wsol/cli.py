"""Command-line entry point: ``wsol <subcommand> [options]``."""
from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import config as configmod
from .augment import POLICIES, AugmentSpec, apply_policy, bilinear_resize
from .boxes import BBox, iou
from .cam import normalize, predict_and_localize
from .data import DatasetError, generate_synthetic, load_class_names, load_dataset, save_dataset
from .evaluation import (SampleResult, evaluate, evaluate_network, format_matrix, run_matrix,
                         worker_count)
from .model import CheckpointError, ModelConfig, build_network, load_checkpoint, save_checkpoint
from .ppm import CodecError, read_ppm, write_ppm
from .rng import AUGMENT, substream
from .train import TrainingDivergedError, channel_mean, fit

USAGE_ERROR = 1
RUNTIME_ERROR = 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _common(p, data=False, checkpoint=False):
    p.add_argument("--config", help="JSON run config")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config field by dotted path (repeatable)")
    p.add_argument("--out", required=True, help="run directory for all outputs")
    if data:
        p.add_argument("--data", required=True, help="dataset directory (holds train/ and test/)")
    if checkpoint:
        p.add_argument("--checkpoint", required=True, help="WSOL-CKPT-v1 checkpoint file")


def build_parser():
    parser = _Parser(prog="wsol", description="Weakly-supervised localization with CAM.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    _common(sub.add_parser("generate-data", help="write a synthetic dataset"))
    _common(sub.add_parser("train", help="train a network"), data=True)

    p = sub.add_parser("evaluate", help="score localization metrics")
    _common(p)
    p.add_argument("--data", help="dataset directory")
    p.add_argument("--checkpoint", help="checkpoint to evaluate")
    p.add_argument("--split", default="test", choices=["train", "test"])
    p.add_argument("--results", help="JSON list of per-sample results to score directly")

    p = sub.add_parser("localize", help="CAM heatmap and box for one image")
    _common(p, checkpoint=True)
    p.add_argument("--image", required=True, help="P6 PPM image")
    p.add_argument("--gt", help="ground-truth box x_min,y_min,x_max,y_max")
    p.add_argument("--target-class", type=int, help="CAM class (default: predicted)")
    p.add_argument("--threshold", type=float, help="override eval.threshold_frac")

    p = sub.add_parser("augment-preview", help="before/after augmentation grids")
    _common(p, data=True)
    p.add_argument("--count", type=int, default=8, help="images per grid")

    _common(sub.add_parser("matrix", help="run the augmentation x batch x depth matrix"), data=True)

    p = sub.add_parser("selftest", help="run the built-in oracle and invariant checks")
    p.add_argument("--quick", action="store_true", help="skip the slower checks")
    return parser


def _write_text(path, text):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text)


def _write_json(path, obj):
    _write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _load_split(data_dir, split):
    return load_dataset(os.path.join(data_dir, split, "manifest.csv"))


def _model_config(cfg, samples, data_dir=None):
    names = load_class_names(os.path.join(data_dir, "train", "manifest.csv")) if data_dir else None
    num_classes = len(names) if names else int(max(s.label for s in samples)) + 1
    return ModelConfig(cfg["model"]["variant"], num_classes, samples[0].image.shape[0])


def cmd_generate_data(args, cfg):
    d = cfg["data"]
    train, test, names = generate_synthetic(d["num_classes"], d["per_class_train"], d["per_class_test"],
                                            d["side"], d["seed"])
    save_dataset(train, os.path.join(args.out, "train"), names)
    save_dataset(test, os.path.join(args.out, "test"), names)
    print(f"wrote {len(train)} train and {len(test)} test samples to {args.out}")


def cmd_train(args, cfg):
    train = _load_split(args.data, "train")
    net = build_network(_model_config(cfg, train, args.data), cfg["model"]["init_seed"])
    tcfg = configmod.train_config(cfg)
    log_path = os.path.join(args.out, "train_log.ndjson")
    with open(log_path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"header": {"train": cfg["train"], "augment": cfg["augment"],
                                        "model": cfg["model"]}}, sort_keys=True) + "\n")

        def on_epoch(rec):
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
            fh.flush()
            print(f"epoch {rec['epoch']:4d}  lr {rec['lr']:.2e}  loss {rec['mean_loss']:.4f}")

        trained, _ = fit(net, train, tcfg, workers=worker_count(), on_epoch=on_epoch)
    path = os.path.join(args.out, "checkpoint.ckpt")
    save_checkpoint(trained, path, extra={"config": cfg})
    print(f"checkpoint written to {path}")


def _results_from_json(path):
    with open(path, encoding="utf-8") as fh:
        records = json.load(fh)
    out = []
    for i, r in enumerate(records):
        out.append(SampleResult(r.get("sample_id", i), r["true_class"], r["predicted_class"],
                                BBox(*r["bbox_top1"]), BBox(*r["bbox_gtknown"]),
                                float(r["iou_top1"]), float(r["iou_gtknown"])))
    return out


def cmd_evaluate(args, cfg):
    if args.results:
        results = _results_from_json(args.results)
        echo = {"source": "results"}
    else:
        if not (args.data and args.checkpoint):
            raise UsageError("evaluate needs --results, or both --data and --checkpoint")
        net, extra = load_checkpoint(args.checkpoint)
        samples = _load_split(args.data, args.split)
        results = evaluate_network(net, samples, cfg["eval"]["threshold_frac"], cfg["eval"]["connectivity"])
        trained_cfg = extra.get("config", {})
        echo = {
            "augment_policy": trained_cfg.get("augment", {}).get("policy"),
            "batch_size": trained_cfg.get("train", {}).get("batch_size"),
            "variant": net.config.variant,
            "seed": net.seed_lineage,
            "split": args.split,
            "eval": cfg["eval"],
        }
        _write_json(os.path.join(args.out, "results.json"), [r.to_dict() for r in results])
    report = evaluate(results, echo)
    _write_json(os.path.join(args.out, "report.json"), report.to_dict())
    print(report.table())


def _draw_box(img, box, color):
    x0, y0, x1, y1 = box.as_tuple()
    img[y0, x0:x1] = color
    img[y1 - 1, x0:x1] = color
    img[y0:y1, x0] = color
    img[y0:y1, x1 - 1] = color


def cmd_localize(args, cfg):
    net, _ = load_checkpoint(args.checkpoint)
    image = read_ppm(args.image)
    threshold = args.threshold if args.threshold is not None else cfg["eval"]["threshold_frac"]
    pred, box, heat = predict_and_localize(net, image, args.target_class, threshold,
                                           cfg["eval"]["connectivity"])
    side = net.config.input_side
    gray = normalize(bilinear_resize(heat, side, side))
    write_ppm(np.repeat(gray[..., None], 3, axis=2), os.path.join(args.out, "heatmap.ppm"))
    overlay = 0.5 * image + 0.5 * np.stack([gray, np.zeros_like(gray), 1.0 - gray], axis=2) * gray[..., None]
    record = {"class": pred, "cam_class": pred if args.target_class is None else args.target_class,
              "box": list(box.as_tuple()), "iou_if_gt_given": None}
    if args.gt:
        try:
            gt = BBox(*(int(v) for v in args.gt.split(",")))
        except (TypeError, ValueError):
            raise UsageError(f"--gt expects x_min,y_min,x_max,y_max, got {args.gt!r}") from None
        _draw_box(overlay, gt, (0.0, 0.0, 1.0))
        record["iou_if_gt_given"] = iou(box, gt)
    _draw_box(overlay, box, (0.0, 1.0, 0.0))
    write_ppm(np.clip(overlay, 0, 1), os.path.join(args.out, "overlay.ppm"))
    _write_json(os.path.join(args.out, "localize.json"), record)
    print(json.dumps(record, sort_keys=True))


def cmd_augment_preview(args, cfg):
    samples = _load_split(args.data, "train")[:args.count]
    fill = cfg["augment"]["fill_value"] or channel_mean(samples).tolist()
    before = np.concatenate([s.image for s in samples], axis=1)
    write_ppm(before, os.path.join(args.out, "before.ppm"))
    for policy in POLICIES:
        spec = AugmentSpec(**{**cfg["augment"], "policy": policy})
        after = [apply_policy(spec, s.image, substream(cfg["train"]["seed"], AUGMENT, 0, i), fill)
                 for i, s in enumerate(samples)]
        write_ppm(np.concatenate([before, np.concatenate(after, axis=1)], axis=0),
                  os.path.join(args.out, f"preview_{policy}.ppm"))
    print(f"wrote previews for {len(POLICIES)} policies to {args.out}")


def cmd_matrix(args, cfg):
    train = _load_split(args.data, "train")
    test = _load_split(args.data, "test")
    m = cfg["matrix"]
    report = run_matrix(train, test, m["policies"], m["batch_sizes"], m["variants"], m["seeds"],
                        configmod.train_config(cfg), cfg["eval"], workers=worker_count())
    _write_json(os.path.join(args.out, "matrix.json"), report)
    table = format_matrix(report)
    _write_text(os.path.join(args.out, "matrix.txt"), table + "\n")
    print(table)
    if report["diverged"]:
        for cell in report["diverged"]:
            print(f"wsol: cell diverged: {cell['error']}", file=sys.stderr)
        return RUNTIME_ERROR
    return 0


def cmd_selftest(args, cfg):
    from .selftest import run_all

    return 0 if run_all(quick=args.quick) else RUNTIME_ERROR


COMMANDS = {
    "generate-data": cmd_generate_data,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "localize": cmd_localize,
    "augment-preview": cmd_augment_preview,
    "matrix": cmd_matrix,
    "selftest": cmd_selftest,
}


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        if args.command == "selftest":
            return cmd_selftest(args, None)
        cfg = configmod.resolve(args.config, args.set)
        os.makedirs(args.out, exist_ok=True)
        _write_text(os.path.join(args.out, "config.json"), configmod.dumps(cfg))
        return COMMANDS[args.command](args, cfg) or 0
    except (UsageError, configmod.ConfigError) as exc:
        print(f"wsol: {exc}", file=sys.stderr)
        return USAGE_ERROR
    except (DatasetError, CodecError, CheckpointError, TrainingDivergedError, OSError, ValueError) as exc:
        print(f"wsol: {exc}", file=sys.stderr)
        return RUNTIME_ERROR


if __name__ == "__main__":
    sys.exit(main())
