"""
Command-line entry point: ``mars {train,eval,detect,ablate,synth,defaults}``.

Exit codes: 0 success, 1 validation error, 2 runtime failure.
"""
import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch
import yaml
from filelock import FileLock, Timeout
from PIL import Image, ImageDraw

from . import config as config_mod
from .ablation import FULL_MATRIX, ALL_VARIANTS, AblationSpec, default_variants, run_ablation
from .checkpoint import load_model
from .data import CLASSES, DOMAINS, build_augmented_dataset, generate_synthetic_dataset, letterbox, to_tensor
from .detector import build_model, decode_predictions, non_max_suppression
from .errors import CheckpointError, ConfigError, DataError, MarsError
from .evaluation import EvalThresholds, evaluate, evaluate_detections, oracle_detections, to_original
from .training import fit

log = logging.getLogger("marsdet")

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2


def _lock(out_dir):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    return FileLock(str(out_dir / ".lock"), timeout=0)


def cmd_train(args):
    cfg = config_mod.load_config(args.config)
    out = cfg.output_path()
    with _lock(out):
        train_m, val_m = config_mod.build_datasets(cfg)
        (out / "resolved_config.yaml").write_text(config_mod.dump_config(cfg))
        model = build_model(cfg.model, cfg.seed)
        log.info("model parameters: %d", model.num_parameters())
        from .data import DetectionDataset
        val_ds = DetectionDataset(val_m, cfg.model.input_size) if cfg.train.eval_every else None
        fit(model, DetectionDataset(train_m, cfg.model.input_size), cfg.train, out_dir=out, eval_dataset=val_ds)
    print(f"checkpoint written to {out / 'checkpoint.mars'}")
    return EXIT_OK


def write_eval_outputs(result, out_dir, title="Evaluation"):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    from .ablation import ResultsTable, TableRow
    table = ResultsTable(title, [TableRow(title, result)], notes=f"AP={result.interpolation}")
    (out_dir / "results.csv").write_text(table.to_csv())
    (out_dir / "results.md").write_text(table.to_markdown())
    (out_dir / "eval.json").write_text(json.dumps(result.to_dict(), indent=1, sort_keys=True) + "\n")
    with open(out_dir / "detections.jsonl", "w") as f:
        for rec in result.records:
            f.write(json.dumps(rec, sort_keys=True) + "\n")
    return table


def cmd_eval(args):
    thresholds = EvalThresholds(args.conf, args.nms_iou, args.match_iou, args.interpolation)
    errs = thresholds.violations()
    if errs:
        raise ConfigError("; ".join(errs), errs)
    manifest = config_mod.load_dataset(args.dataset, ".", "val")
    if args.oracle:
        result = evaluate_detections(oracle_detections(manifest), manifest, thresholds)
    else:
        if args.checkpoint is None:
            raise ConfigError("a checkpoint is required unless --oracle is given")
        model, _ = load_model(args.checkpoint)
        if model.cfg.num_classes != len(manifest.classes):
            raise DataError(f"class-list mismatch: checkpoint has {model.cfg.num_classes} classes, "
                            f"dataset lists {len(manifest.classes)}")
        result = evaluate(model, manifest, thresholds)
    table = write_eval_outputs(result, args.out)
    print(table.to_markdown())
    return EXIT_OK


def detect_image(model, image, conf_threshold=0.5, nms_iou=0.45):
    """Detections for one RGB array, in original-image pixels."""
    canvas, tf = letterbox(image, model.cfg.input_size)
    model.eval()
    with torch.no_grad():
        raw, _ = model(to_tensor(canvas)[None])
    dets = non_max_suppression(decode_predictions(raw, model.cfg, conf_threshold)[0], nms_iou)
    h, w = image.shape[:2]

    class _Rec:
        width, height, image_id = w, h, None
    return to_original(dets, tf, _Rec)


def render_detections(image, dets, classes=CLASSES):
    im = Image.fromarray(np.asarray(image)).convert("RGB")
    draw = ImageDraw.Draw(im)
    for d in dets:
        draw.rectangle(d.box, outline=(255, 40, 40), width=2)
        draw.text((d.box[0] + 2, d.box[1] + 1), f"{classes[d.class_id]} {d.confidence:.2f}", fill=(255, 255, 0))
    return im


def detection_list(dets, classes=CLASSES):
    return [{
        "class": classes[d.class_id], "confidence": d.confidence,
        "x_min": d.box[0], "y_min": d.box[1], "x_max": d.box[2], "y_max": d.box[3],
    } for d in dets]


def cmd_detect(args):
    model, _ = load_model(args.checkpoint)
    try:
        with Image.open(args.image) as im:
            image = np.asarray(im.convert("RGB"))
    except OSError as e:
        raise DataError(f"cannot read image {args.image}: {e}") from e
    dets = detect_image(model, image, args.conf, args.nms_iou)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stem = Path(args.image).stem
    render_detections(image, dets).save(out / f"{stem}_detections.png")
    (out / f"{stem}_detections.json").write_text(json.dumps(detection_list(dets), indent=1) + "\n")
    print(f"{len(dets)} detection(s) written to {out}")
    return EXIT_OK


def load_ablation_specs(path):
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text()) or {}
    except (OSError, yaml.YAMLError) as e:
        raise ConfigError(f"cannot read ablation spec {path}: {e}") from e
    abl = raw.pop("ablation", None) or {}
    cfg = config_mod.parse_config(raw, base_dir=path.parent)
    tables = abl.get("tables")
    if tables is None:
        if abl.get("matrix", "full") != "full":
            raise ConfigError("ablation.matrix must be 'full' when no tables are listed")
        tables = [{"dataset_mode": d, "domain_mode": m} for d, m in FULL_MATRIX]
    specs, errors = [], []
    for n, t in enumerate(tables):
        dm, om = t.get("dataset_mode", "original"), t.get("domain_mode", "off")
        if isinstance(om, bool):  # YAML reads bare off/on as booleans
            om = "on" if om else "off"
        labels = t.get("variants")
        if labels is None:
            variants = default_variants(om)
        else:
            unknown = [l for l in labels if l not in ALL_VARIANTS]
            if unknown:
                errors.append(f"ablation.tables[{n}].variants: unknown labels {unknown}")
                continue
            variants = [(l, ALL_VARIANTS[l]) for l in labels]
        try:
            specs.append(AblationSpec(variants, dm, om, cfg.train, cfg.model, cfg.eval, cfg.seed))
        except ValueError as e:
            errors.append(f"ablation.tables[{n}]: {e}")
    if errors:
        raise ConfigError("; ".join(errors), errors)
    return cfg, specs


def cmd_ablate(args):
    cfg, specs = load_ablation_specs(args.spec)
    out = cfg.output_path()
    with _lock(out):
        data = {}
        for mode in sorted({s.dataset_mode for s in specs}):
            data[mode] = config_mod.build_datasets(replace(cfg, data=replace(cfg.data, mode=mode)))
        md = []
        for spec in specs:
            train_m, val_m = data[spec.dataset_mode]
            table = run_ablation(spec, train_m, val_m, out)
            md.append(table.to_markdown())
        (out / "tables.md").write_text("\n".join(md))
    print("\n".join(md))
    return EXIT_OK


def cmd_synth(args):
    if args.n < 1:
        raise ConfigError("--n must be >= 1")
    out = Path(args.out)
    try:
        (out / "images").mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise MarsError(f"cannot create {out}: {e}") from e
    manifest = generate_synthetic_dataset(args.n, args.image_size, args.seed)
    paths = {}
    for r in manifest.records:
        rel = f"images/{r.image_id}.png"
        Image.fromarray(r.image_ref).save(out / rel)
        paths[r.image_id] = rel
    manifest.save(out / "manifest.json", paths)
    msg = f"{len(manifest)} images written to {out}"
    if args.augment:
        aug = build_augmented_dataset(manifest, args.strength, seed=args.seed)
        aug.save(out / "manifest_augmented.json", paths)
        msg += f"; augmented manifest with {len(aug)} records over {len(DOMAINS)} domains"
    print(msg)
    return EXIT_OK


def cmd_defaults(args):
    print(config_mod.default_reference(), end="")
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="mars", description="Underwater object detector: train, evaluate, ablate.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model from a YAML run config")
    t.add_argument("config")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset (JSON manifest or VOC dir)")
    e.add_argument("checkpoint", nargs="?")
    e.add_argument("dataset")
    e.add_argument("--out", default="eval_out")
    e.add_argument("--oracle", action="store_true", help="replay ground truth as detections")
    e.add_argument("--conf", type=float, default=0.05)
    e.add_argument("--nms-iou", type=float, default=0.45)
    e.add_argument("--match-iou", type=float, default=0.5)
    e.add_argument("--interpolation", choices=("all-point", "11-point"), default="all-point")
    e.set_defaults(func=cmd_eval)

    d = sub.add_parser("detect", help="draw detections on one image")
    d.add_argument("checkpoint")
    d.add_argument("image")
    d.add_argument("--out", default="detect_out")
    d.add_argument("--conf", type=float, default=0.5)
    d.add_argument("--nms-iou", type=float, default=0.45)
    d.set_defaults(func=cmd_detect)

    a = sub.add_parser("ablate", help="run an ablation spec and emit result tables")
    a.add_argument("spec")
    a.set_defaults(func=cmd_ablate)

    s = sub.add_parser("synth", help="write a synthetic shapes dataset")
    s.add_argument("--n", type=int, default=8)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--image-size", type=int, default=96)
    s.add_argument("--out", required=True)
    s.add_argument("--augment", action="store_true", help="also write the 7-domain augmented manifest")
    s.add_argument("--strength", type=float, default=1.0)
    s.set_defaults(func=cmd_synth)

    r = sub.add_parser("defaults", help="print the default configuration reference")
    r.set_defaults(func=cmd_defaults)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, DataError, CheckpointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except Timeout as e:
        print(f"error: output directory is locked by another run ({e.lock_file})", file=sys.stderr)
        return EXIT_RUNTIME
    except (MarsError, RuntimeError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
