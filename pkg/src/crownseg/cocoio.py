"""COCO-style files: tile datasets written by :func:`crownseg.geodata.export_coco` and RLE result lists."""
from __future__ import annotations

import json
from pathlib import Path
from typing import Mapping, Sequence

import jsonschema
import numpy as np
from PIL import Image
from pycocotools import mask as mask_utils
from shapely.geometry import MultiPolygon, Polygon

from .geodata import rasterize_polygon, read_dsm_tiff
from .structures import Detection
from .trainer import Sample

_NUMBER = {"type": "number"}
DATASET_SCHEMA = {
    "type": "object",
    "required": ["images", "annotations", "categories"],
    "properties": {
        "images": {"type": "array", "items": {
            "type": "object",
            "required": ["id", "file_name", "width", "height"],
            "properties": {"id": {"type": "integer"}, "file_name": {"type": "string"},
                           "width": {"type": "integer", "minimum": 1}, "height": {"type": "integer", "minimum": 1},
                           "tile_id": {"type": "string"}, "dsm_file_name": {"type": "string"}},
        }},
        "annotations": {"type": "array", "items": {
            "type": "object",
            "required": ["id", "image_id", "category_id", "segmentation"],
            "properties": {"image_id": {"type": "integer"}, "category_id": {"type": "integer"},
                           "segmentation": {"type": "array", "items": {"type": "array", "items": _NUMBER}}},
        }},
        "categories": {"type": "array", "minItems": 1, "items": {
            "type": "object", "required": ["id", "name"],
            "properties": {"id": {"type": "integer"}, "name": {"type": "string"}},
        }},
    },
}
RESULTS_SCHEMA = {
    "type": "array",
    "items": {
        "type": "object",
        "required": ["tile_id", "category", "bbox", "score"],
        "properties": {
            "tile_id": {"type": "string"},
            "category": {"type": "string"},
            "bbox": {"type": "array", "items": _NUMBER, "minItems": 4, "maxItems": 4},
            "score": {"type": "number", "minimum": 0, "maximum": 1},
            "segmentation": {"type": "object", "required": ["size", "counts"],
                             "properties": {"size": {"type": "array", "items": {"type": "integer"}},
                                            "counts": {"type": "string"}}},
        },
    },
}


class SchemaError(ValueError):
    """A JSON input that does not match its expected layout; the message names the file."""


def load_json(path: str | Path, schema: Mapping | None = None):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"{path}: no such file")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise SchemaError(f"{path}: malformed JSON ({e.msg} at line {e.lineno})") from None
    if schema is not None:
        validate(doc, schema, path)
    return doc


def validate(doc, schema: Mapping, path: str | Path) -> None:
    err = jsonschema.exceptions.best_match(jsonschema.Draft7Validator(schema).iter_errors(doc))
    if err is not None:
        where = "/".join(str(p) for p in err.absolute_path) or "<root>"
        raise SchemaError(f"{path}: schema validation failed at {where}: {err.message}")


def dump_json(path: str | Path, doc) -> None:
    """Stable formatting so identical inputs give identical bytes."""
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def _polygon(segmentation: Sequence[Sequence[float]]):
    rings = [Polygon(np.asarray(s, dtype=float).reshape(-1, 2)) for s in segmentation if len(s) >= 6]
    return rings[0] if len(rings) == 1 else MultiPolygon(rings)


def dataset_classes(doc: Mapping) -> list[str]:
    return [c["name"] for c in sorted(doc["categories"], key=lambda c: c["id"])]


def load_dataset(path: str | Path) -> tuple[list[Sample], list[str]]:
    """Samples (image, masks, labels, DSM) for every image in a COCO split file, plus its class list."""
    path = Path(path)
    doc = load_json(path, DATASET_SCHEMA)
    names = {c["id"]: c["name"] for c in doc["categories"]}
    by_image: dict[int, list] = {}
    for a in doc["annotations"]:
        if a["category_id"] not in names:
            raise SchemaError(f"{path}: annotation {a['id']} has unknown category_id {a['category_id']}")
        by_image.setdefault(a["image_id"], []).append(a)
    samples = []
    for im in sorted(doc["images"], key=lambda i: i["id"]):
        image = np.array(Image.open(path.parent / im["file_name"]).convert("RGB"))
        hw = (im["height"], im["width"])
        anns = by_image.get(im["id"], [])
        masks = [rasterize_polygon(_polygon(a["segmentation"]), hw) for a in anns]
        keep = [k for k, m in enumerate(masks) if m.any()]
        dsm = None
        if "dsm_file_name" in im:
            dsm = read_dsm_tiff(path.parent / im["dsm_file_name"]).astype(np.float32)
        samples.append(Sample(
            im.get("tile_id", str(im["id"])), image,
            np.stack([masks[k] for k in keep]) if keep else np.zeros((0, *hw), bool),
            [names[anns[k]["category_id"]] for k in keep], dsm, ~np.all(image == 0, axis=-1)))
    return samples, dataset_classes(doc)


def encode_mask(mask: np.ndarray) -> dict:
    rle = mask_utils.encode(np.asfortranarray(mask.astype(np.uint8)))
    return {"size": [int(v) for v in rle["size"]], "counts": rle["counts"].decode("ascii")}


def decode_mask(rle: Mapping) -> np.ndarray:
    return mask_utils.decode({"size": list(rle["size"]), "counts": rle["counts"].encode("ascii")}).astype(bool)


def _r(x: float) -> float:
    return round(float(x), 6)


def detections_to_results(predictions: Mapping[str, Sequence[Detection]]) -> list[dict]:
    """Flat result records, ordered by tile then descending score."""
    out = []
    for tile_id in sorted(predictions):
        for d in sorted(predictions[tile_id], key=lambda d: -d.score):
            x0, y0, x1, y1 = d.box
            rec = {"tile_id": tile_id, "category": d.class_label, "bbox": [_r(x0), _r(y0), _r(x1 - x0), _r(y1 - y0)],
                   "score": _r(d.score), "box_score": _r(d.box_score)}
            if d.mask_score is not None:
                rec["mask_score"] = _r(d.mask_score)
            if d.mask is not None:
                rec["segmentation"] = encode_mask(d.mask)
            out.append(rec)
    return out


def results_to_detections(results: Sequence[Mapping]) -> dict[str, list[Detection]]:
    preds: dict[str, list[Detection]] = {}
    for r in results:
        x, y, w, h = r["bbox"]
        mask = decode_mask(r["segmentation"]) if "segmentation" in r else None
        preds.setdefault(r["tile_id"], []).append(Detection(
            box=(x, y, x + w, y + h), class_label=r["category"], box_score=r.get("box_score", r["score"]),
            mask=mask, mask_score=r.get("mask_score"), score=r["score"]))
    return preds


def load_results(path: str | Path) -> dict[str, list[Detection]]:
    return results_to_detections(load_json(path, RESULTS_SCHEMA))
