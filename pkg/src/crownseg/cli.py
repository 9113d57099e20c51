"""``crownseg`` command line: tile, schema build, prompts preview, train, predict, eval, panel.

Exit status is 0 on success, 1 on input or runtime errors and 2 on usage
errors. Diagnostics go to standard error; data goes to ``--out`` or stdout.
"""
from __future__ import annotations

import argparse
import colorsys
import hashlib
import json
import logging
import sys
from dataclasses import fields, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import yaml
from PIL import Image, ImageDraw

from . import cocoio
from .dsmtools import DsmChannel, PeakConfig, normalize_dsm, peak_prompts
from .geodata import (
    SPLITS, ClipDiagnostics, assign_splits, clip_annotations_to_tile, export_coco, filter_tiles, read_annotations,
    read_aoi, read_features, read_orthomosaic, tile_orthomosaic,
)
from .metrics import COCO_IOU_THRESHOLDS, evaluate
from .structures import Detection
from .taxonomy import build_schema, load_schema, load_taxonomy
from .trainer import TrainConfig, load_checkpoint, make_recipe, predict_samples, seed_everything, train
from .zoo import MODEL_KINDS, ModelSpec, build_model

log = logging.getLogger("crownseg")

_TRAIN_KEYS = {f.name for f in fields(TrainConfig)} - {"warmup", "model_kind"}
_SPEC_KEYS = {f.name for f in fields(ModelSpec)} - {"model_kind", "num_classes"}
TRAIN_CONFIG_SCHEMA = {
    "type": "object",
    "required": ["model_kind", "train_data"],
    "properties": {
        "model_kind": {"enum": list(MODEL_KINDS)},
        "train_data": {"type": "string"},
        "val_data": {"type": "string"},
        "dataset_id": {"type": "string"},
        "max_steps": {"type": "integer", "minimum": 1},
        **{k: {} for k in _TRAIN_KEYS | _SPEC_KEYS},
        **{f"warmup.{k}": {} for k in ("kind", "start_lr", "duration")},
    },
    "additionalProperties": False,
}


class CliError(Exception):
    """Reported as ``error: <message>`` with exit status 1."""


# ---------------------------------------------------------------- helpers

def class_colour(code: str) -> tuple[int, int, int]:
    """Deterministic colour from a hash of the class code, identical across runs and panels."""
    h = int.from_bytes(hashlib.sha256(code.encode("utf-8")).digest()[:4], "big")
    r, g, b = colorsys.hsv_to_rgb((h % 360) / 360.0, 0.55 + 0.4 * ((h >> 9) % 100) / 100, 0.95)
    return int(255 * r), int(255 * g), int(255 * b)


def _out_dir(args) -> Path:
    if not args.out:
        raise CliError(f"{args.command} needs --out")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _emit(args, name: str, doc) -> None:
    """Write ``doc`` as JSON to ``--out/name`` or, without ``--out``, to stdout."""
    if args.out:
        cocoio.dump_json(_out_dir(args) / name, doc)
    else:
        sys.stdout.write(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def overlay(image: np.ndarray, instances: Sequence[tuple[Optional[np.ndarray], tuple, str]],
            alpha: float = 0.45) -> Image.Image:
    """Blend masks (or outline boxes) onto ``image`` in each instance's class colour."""
    out = image[..., :3].astype(np.float64).copy()
    boxes = []
    for mask, box, label in instances:
        c = np.array(class_colour(label), float)
        if mask is not None:
            out[mask] = (1 - alpha) * out[mask] + alpha * c
        else:
            boxes.append((box, tuple(int(v) for v in c)))
    img = Image.fromarray(np.clip(out, 0, 255).astype(np.uint8))
    draw = ImageDraw.Draw(img)
    for box, c in boxes:
        draw.rectangle(box, outline=c, width=2)
    return img


def _save_png(img: Image.Image, path: Path) -> None:
    img.save(path, format="PNG", optimize=False)


# ---------------------------------------------------------------- subcommands

def cmd_tile(args) -> int:
    raster = read_orthomosaic(args.raster, dsm_path=args.dsm)
    anns = read_annotations(args.annotations, args.label_field)
    aoi = read_aoi(args.aoi) if args.aoi else None
    tiles = tile_orthomosaic(raster, aoi, args.tile_size, args.overlap, anns)
    diag = ClipDiagnostics()
    tiles = [clip_annotations_to_tile(t, args.min_visibility, diag) for t in tiles]
    tiles = filter_tiles(tiles, args.max_black_fraction, require_labels=not args.keep_empty)
    if args.splits:
        polys: dict = {}
        for geom, props in read_features(args.splits):
            if "split" not in props:
                raise CliError(f"{args.splits}: every split feature needs a 'split' property")
            polys[props["split"]] = geom if props["split"] not in polys else polys[props["split"]].union(geom)
        tiles = assign_splits(tiles, polys)
    else:
        tiles = [replace(t, split=args.default_split) for t in tiles]
    schema = load_schema(args.schema) if args.schema else None
    class_map = schema.map if schema else None
    classes = list(schema.classes) if schema else sorted({a.class_label for t in tiles for a in t.annotations})
    if not tiles:
        raise CliError("no tiles left after filtering")
    paths = export_coco(tiles, _out_dir(args), classes, class_map)
    log.info("%d tiles, %d crowns dropped as degenerate, %d below visibility", len(tiles), diag.degenerate,
             diag.below_visibility)
    for split, p in paths.items():
        print(f"{split}\t{p}")
    return 0


def _counts_from(path: str) -> dict[str, int]:
    doc = cocoio.load_json(path)
    if isinstance(doc, dict) and "annotations" in doc:
        cocoio.validate(doc, cocoio.DATASET_SCHEMA, path)
        names = {c["id"]: c["name"] for c in doc["categories"]}
        counts: dict[str, int] = {}
        for a in doc["annotations"]:
            counts[names[a["category_id"]]] = counts.get(names[a["category_id"]], 0) + 1
        return counts
    cocoio.validate(doc, {"type": "object", "additionalProperties": {"type": "integer", "minimum": 0}}, path)
    return doc


def cmd_schema_build(args) -> int:
    counts = _counts_from(args.counts)
    taxonomy = load_taxonomy(args.taxonomy) if args.taxonomy else None
    schema = build_schema(counts, args.min_count, args.grouping, taxonomy, args.other_class, args.force_other)
    _emit(args, "schema.json", schema.to_dict())
    return 0


def _find_sample(data: str, tile_id: Optional[str]):
    samples, classes = cocoio.load_dataset(data)
    if not samples:
        raise CliError(f"{data}: no images")
    if tile_id is None:
        return samples[0]
    for s in samples:
        if s.tile_id == tile_id:
            return s
    raise CliError(f"{data}: no tile {tile_id!r}")


def cmd_prompts_preview(args) -> int:
    s = _find_sample(args.data, args.tile)
    if s.dsm is None:
        raise CliError(f"tile {s.tile_id} has no DSM")
    ch = normalize_dsm(DsmChannel(s.dsm, s.valid))
    peaks = peak_prompts(ch, PeakConfig(args.min_distance))
    img = Image.fromarray(np.ascontiguousarray(s.image[..., :3].astype(np.uint8)))
    draw = ImageDraw.Draw(img)
    r = max(2, s.image.shape[0] // 128)
    for x, y in peaks:
        draw.ellipse((x - r, y - r, x + r, y + r), fill=(255, 40, 40), outline=(255, 255, 255))
    out = _out_dir(args)
    _save_png(img, out / f"{s.tile_id}_peaks.png")
    cocoio.dump_json(out / f"{s.tile_id}_peaks.json", [[int(x), int(y)] for x, y in peaks])
    print(f"{len(peaks)} peaks")
    return 0


def load_train_config(path: str) -> dict:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"{p}: no such file")
    try:
        doc = yaml.safe_load(p.read_text())
    except yaml.YAMLError as e:
        raise cocoio.SchemaError(f"{p}: malformed config ({e})") from None
    cocoio.validate(doc, TRAIN_CONFIG_SCHEMA, p)
    return doc


def resolve_train_config(doc: dict, seed: Optional[int]) -> TrainConfig:
    """The published recipe for ``model_kind``/``dataset_id`` with any flat overrides applied."""
    base = make_recipe(doc["model_kind"], doc.get("dataset_id", "synthetic")).to_flat()
    base.update({k: v for k, v in doc.items() if k in _TRAIN_KEYS or k.startswith("warmup.")})
    if seed is not None:
        base["seed"] = seed
    return TrainConfig.from_flat(base)


def cmd_train(args) -> int:
    if not args.config:
        raise CliError("train needs --config")
    doc = load_train_config(args.config)
    base = Path(args.config).parent
    train_samples, classes = cocoio.load_dataset(base / doc["train_data"])
    data = {"train": train_samples}
    if "val_data" in doc:
        data["val"], val_classes = cocoio.load_dataset(base / doc["val_data"])
        if val_classes != classes:
            raise CliError("train and val files disagree on categories")
    cfg = resolve_train_config(doc, args.seed)
    spec = ModelSpec.from_dict({**{k: v for k, v in doc.items() if k in _SPEC_KEYS},
                                "model_kind": doc["model_kind"], "num_classes": len(classes)})
    seed_everything(cfg.seed)
    model = build_model(spec, args.device)
    out = _out_dir(args)
    cocoio.dump_json(out / "config.json", {"model": spec.to_dict(), "train": cfg.to_flat(), "classes": classes})
    res = train(model, data, cfg, classes, out_dir=out, max_steps=doc.get("max_steps"),
                sidecar={"model": spec.to_dict()})
    print(f"best epoch {res.best_epoch}\tval mAP {res.best_map:.4f}")
    return 0


def cmd_predict(args) -> int:
    side_path = Path(args.checkpoint).with_suffix(".json")
    meta = cocoio.load_json(side_path, {"type": "object", "required": ["model", "classes"]})
    spec = ModelSpec.from_dict(meta["model"])
    seed_everything(args.seed or 0)
    model = build_model(spec, args.device)
    load_checkpoint(args.checkpoint, model)
    samples, _ = cocoio.load_dataset(args.data)
    classes = meta["classes"]
    preds = predict_samples(model, samples, classes)
    out = _out_dir(args)
    cocoio.dump_json(out / "results.json", cocoio.detections_to_results(preds))
    if args.overlays:
        (out / "overlays").mkdir(exist_ok=True)
        for s in samples:
            inst = [(d.mask, d.box, d.class_label) for d in preds[s.tile_id]]
            _save_png(overlay(s.image, inst), out / "overlays" / f"{s.tile_id}.png")
    print(f"{sum(map(len, preds.values()))} detections on {len(samples)} tiles")
    return 0


def cmd_eval(args) -> int:
    samples, classes = cocoio.load_dataset(args.gt)
    preds = cocoio.load_results(args.results)
    unknown = sorted(set(preds) - {s.tile_id for s in samples})
    if unknown:
        raise CliError(f"{args.results}: results for tiles missing from {args.gt}: {unknown[:5]}")
    gt = {s.tile_id: s.ground_truth() for s in samples}
    thresholds = (0.5,) if args.iou_mode == "0.5" else COCO_IOU_THRESHOLDS
    report = evaluate({t: preds.get(t, []) for t in gt}, gt, classes, thresholds)
    if args.out:
        cocoio.dump_json(_out_dir(args) / "report.json", report.to_dict())
    sys.stdout.write(report.table())
    return 0


def cmd_panel(args) -> int:
    if len(args.results) < 2:
        raise CliError("need ≥2 methods: a panel compares several result files")
    names = args.names or [Path(p).parent.name or Path(p).stem for p in args.results]
    if len(names) != len(args.results):
        raise CliError("--names must match --results one to one")
    samples, _ = cocoio.load_dataset(args.gt)
    if args.tiles:
        wanted = set(args.tiles)
        samples = [s for s in samples if s.tile_id in wanted]
        if len(samples) != len(wanted):
            raise CliError(f"{args.gt}: some requested tiles are missing")
    methods = [cocoio.load_results(p) for p in args.results]
    rows = []
    for s in samples:
        cols = [Image.fromarray(np.ascontiguousarray(s.image[..., :3].astype(np.uint8))),
                overlay(s.image, [(m, None, c) for m, c in zip(s.masks.astype(bool), s.labels)])]
        for preds in methods:
            dets: list[Detection] = [d for d in preds.get(s.tile_id, []) if d.score >= args.score_threshold]
            cols.append(overlay(s.image, [(d.mask, d.box, d.class_label) for d in dets]))
        rows.append(cols)
    if not rows:
        raise CliError("no tiles to draw")
    w, h = rows[0][0].size
    header = 18
    canvas = Image.new("RGB", (w * len(rows[0]), header + h * len(rows)), (255, 255, 255))
    draw = ImageDraw.Draw(canvas)
    for j, title in enumerate(["RGB", "ground truth", *names]):
        draw.text((j * w + 4, 3), title, fill=(0, 0, 0))
    for i, cols in enumerate(rows):
        for j, im in enumerate(cols):
            canvas.paste(im, (j * w, header + i * h))
    _save_png(canvas, _out_dir(args) / "panel.png")
    return 0


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key-value config file (YAML or JSON)")
    common.add_argument("--device", default="cpu", help="torch device, e.g. cpu or cuda:0")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--out", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="crownseg", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("tile", parents=[common], help="cut an orthomosaic into COCO tiles")
    t.add_argument("--raster", required=True)
    t.add_argument("--dsm")
    t.add_argument("--annotations", required=True)
    t.add_argument("--label-field", default="Label")
    t.add_argument("--aoi")
    t.add_argument("--splits", help="polygons with a 'split' property (train/val/test)")
    t.add_argument("--default-split", default="train", choices=SPLITS)
    t.add_argument("--schema", help="class schema file or bundled name")
    t.add_argument("--tile-size", type=int, default=1024)
    t.add_argument("--overlap", type=float, default=0.5)
    t.add_argument("--min-visibility", type=float, default=0.2)
    t.add_argument("--max-black-fraction", type=float, default=0.8)
    t.add_argument("--keep-empty", action="store_true")
    t.set_defaults(func=cmd_tile)

    sc = sub.add_parser("schema", help="class schema tools")
    scs = sc.add_subparsers(dest="schema_command", required=True)
    b = scs.add_parser("build", parents=[common], help="label counts -> class schema")
    b.add_argument("--counts", required=True, help="JSON {label: count} or a COCO split file")
    b.add_argument("--min-count", type=int, required=True)
    b.add_argument("--grouping", choices=("species", "family"), default="species")
    b.add_argument("--taxonomy")
    b.add_argument("--other-class", default="Other")
    b.add_argument("--force-other", nargs="*", default=())
    b.set_defaults(func=cmd_schema_build)

    pr = sub.add_parser("prompts", help="prompt tools")
    prs = pr.add_subparsers(dest="prompts_command", required=True)
    pv = prs.add_parser("preview", parents=[common], help="draw DSM-peak prompts on a tile")
    pv.add_argument("--data", required=True, help="COCO split file")
    pv.add_argument("--tile")
    pv.add_argument("--min-distance", type=int, default=20)
    pv.set_defaults(func=cmd_prompts_preview)

    tr = sub.add_parser("train", parents=[common], help="train a model from a config")
    tr.set_defaults(func=cmd_train)

    pd = sub.add_parser("predict", parents=[common], help="run a checkpoint over tiles")
    pd.add_argument("--checkpoint", required=True)
    pd.add_argument("--data", required=True)
    pd.add_argument("--overlays", action="store_true")
    pd.set_defaults(func=cmd_predict)

    ev = sub.add_parser("eval", parents=[common], help="score results against ground truth")
    ev.add_argument("--gt", required=True)
    ev.add_argument("--results", required=True)
    ev.add_argument("--iou-mode", choices=("coco", "0.5"), default="coco",
                    help="AP over IoU 0.50:0.95 (default) or at the single threshold 0.5")
    ev.set_defaults(func=cmd_eval)

    pa = sub.add_parser("panel", parents=[common], help="side-by-side comparison figure")
    pa.add_argument("--gt", required=True)
    pa.add_argument("--results", nargs="+", required=True)
    pa.add_argument("--names", nargs="+")
    pa.add_argument("--tiles", nargs="+")
    pa.add_argument("--score-threshold", type=float, default=0.5)
    pa.set_defaults(func=cmd_panel)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (CliError, cocoio.SchemaError, FileNotFoundError, ValueError, KeyError) as e:
        msg = e.args[0] if isinstance(e, KeyError) and e.args else e
        print(f"error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
