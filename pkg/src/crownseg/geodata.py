"""Orthomosaic tiling, annotation clipping, tile filtering, spatial splits and COCO export."""
from __future__ import annotations

import json
import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Literal, Mapping, Optional, Sequence

import numpy as np
import rasterio
import rasterio.features
from affine import Affine
from PIL import Image
from shapely import affinity
from shapely.geometry import MultiPolygon, Polygon, mapping, shape
from shapely.geometry.base import BaseGeometry
from shapely.validation import explain_validity

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test", "unassigned")


@dataclass
class Orthomosaic:
    """A raster held in memory as ``(H, W, C)`` with ``C`` in {3, 4}; band 4 is the DSM."""

    raster_id: str
    bands: np.ndarray
    pixel_resolution: float = 1.0
    nodata_value: float = 0
    geotransform: Affine = field(default_factory=Affine.identity)

    def __post_init__(self):
        self.bands = np.asarray(self.bands)
        if self.bands.ndim != 3 or self.bands.shape[2] not in (3, 4):
            raise ValueError(f"bands must be H x W x 3|4, got {self.bands.shape}")
        if self.pixel_resolution <= 0:
            raise ValueError("pixel_resolution must be positive")
        if not isinstance(self.geotransform, Affine):
            self.geotransform = Affine(*self.geotransform[:6])

    @property
    def height(self) -> int:
        return self.bands.shape[0]

    @property
    def width(self) -> int:
        return self.bands.shape[1]

    @property
    def rgb(self) -> np.ndarray:
        return self.bands[..., :3]

    @property
    def dsm(self) -> Optional[np.ndarray]:
        return self.bands[..., 3] if self.bands.shape[2] == 4 else None


@dataclass
class CrownAnnotation:
    polygon: BaseGeometry
    class_label: str
    instance_id: str

    def __post_init__(self):
        if not isinstance(self.polygon, (Polygon, MultiPolygon)):
            raise TypeError("crown geometry must be a Polygon or MultiPolygon")
        if not self.polygon.is_valid:
            raise ValueError(f"invalid crown {self.instance_id}: {explain_validity(self.polygon)}")
        if self.polygon.area <= 0:
            raise ValueError(f"crown {self.instance_id} has zero area")


@dataclass
class AOI:
    polygons: BaseGeometry
    purpose: Literal["include", "exclude-mask"] = "include"

    def __post_init__(self):
        if self.polygons.is_empty:
            raise ValueError("AOI is empty")
        if not self.polygons.is_valid:
            raise ValueError(f"invalid AOI geometry: {explain_validity(self.polygons)}")
        if self.purpose not in ("include", "exclude-mask"):
            raise ValueError(f"unknown AOI purpose {self.purpose!r}")


@dataclass
class TileAnnotation:
    """A crown clipped to a tile, in tile-pixel coordinates."""

    polygon: BaseGeometry
    class_label: str
    instance_id: str
    visibility_fraction: float

    def to_mask(self, shape: tuple[int, int]) -> np.ndarray:
        return rasterize_polygon(self.polygon, shape)


@dataclass
class Tile:
    tile_id: str
    origin: tuple[int, int]
    image: np.ndarray
    dsm: Optional[np.ndarray] = None
    annotations: list[TileAnnotation] = field(default_factory=list)
    split: str = "unassigned"
    black_fraction: float = 0.0
    transform: Affine = field(default_factory=Affine.identity)
    # world-coordinate crowns touching the window, consumed by clip_annotations_to_tile
    candidates: list[CrownAnnotation] = field(default_factory=list, repr=False)

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[2] != 3 or self.image.shape[0] != self.image.shape[1]:
            raise ValueError(f"tile image must be square H x W x 3, got {self.image.shape}")
        if self.dsm is not None and self.dsm.shape[:2] != self.image.shape[:2]:
            raise ValueError("DSM and image dimensions differ")
        if not 0.0 <= self.black_fraction <= 1.0:
            raise ValueError("black_fraction must lie in [0, 1]")
        if self.split not in SPLITS:
            raise ValueError(f"unknown split {self.split!r}")

    @property
    def size(self) -> int:
        return self.image.shape[0]

    @property
    def valid_mask(self) -> np.ndarray:
        return ~np.all(self.image == 0, axis=-1)

    def world_window(self) -> Polygon:
        t = self.transform
        corners = [t @ (0, 0), t @ (self.size, 0), t @ (self.size, self.size), t @ (0, self.size)]
        return Polygon(corners)

    def center_world(self) -> tuple[float, float]:
        return self.transform @ (self.size / 2, self.size / 2)

    def masks(self) -> np.ndarray:
        hw = self.image.shape[:2]
        if not self.annotations:
            return np.zeros((0, *hw), dtype=bool)
        return np.stack([a.to_mask(hw) for a in self.annotations])


def rasterize_polygon(poly: BaseGeometry, shape: tuple[int, int]) -> np.ndarray:
    """Burn pixels whose centres fall inside ``poly`` (pixel coordinates)."""
    if poly.is_empty:
        return np.zeros(shape, dtype=bool)
    out = rasterio.features.rasterize([(poly, 1)], out_shape=shape, fill=0, dtype="uint8")
    return out.astype(bool)


def axis_origins(length: int, size: int, overlap: float) -> list[int]:
    """Window starts along one axis: stride ``size * (1 - overlap)``, last window snapped to the edge."""
    stride = max(1, int(round(size * (1.0 - overlap))))
    origins = list(range(0, length - size + 1, stride))
    if origins[-1] + size < length:
        origins.append(length - size)
    return sorted(set(origins))


def _aoi_valid(aoi: Optional[AOI], transform: Affine, shape: tuple[int, int]) -> np.ndarray:
    if aoi is None:
        return np.ones(shape, dtype=bool)
    inside = rasterio.features.geometry_mask([aoi.polygons], out_shape=shape, transform=transform, invert=True)
    return inside if aoi.purpose == "include" else ~inside


def tile_orthomosaic(
    raster: Orthomosaic,
    aoi: Optional[AOI] = None,
    tile_size: int = 1024,
    overlap: float = 0.5,
    annotations: Sequence[CrownAnnotation] = (),
) -> list[Tile]:
    """Cut ``raster`` into square tiles; pixels outside ``aoi`` are blacked out.

    Crowns in ``annotations`` that intersect a tile window are attached as
    candidates for :func:`clip_annotations_to_tile`.
    """
    if tile_size < 1:
        raise ValueError("tile_size must be >= 1")
    if not 0.0 <= overlap < 1.0:
        raise ValueError("overlap must lie in [0, 1)")
    if raster.height < tile_size or raster.width < tile_size:
        raise ValueError("raster too small")

    ys = axis_origins(raster.height, tile_size, overlap)
    xs = axis_origins(raster.width, tile_size, overlap)
    tiles = []
    for y in ys:
        for x in xs:
            window = raster.bands[y:y + tile_size, x:x + tile_size]
            transform = raster.geotransform @ Affine.translation(x, y)
            keep = _aoi_valid(aoi, transform, (tile_size, tile_size))
            rgb = np.where(keep[..., None], window[..., :3], raster.nodata_value).astype(raster.bands.dtype)
            dsm = None
            if raster.dsm is not None:
                dsm = np.where(keep, window[..., 3], 0).astype(np.float32)
            black = np.all(rgb == raster.nodata_value, axis=-1)
            tile = Tile(
                tile_id=f"{raster.raster_id}_{x}_{y}",
                origin=(x, y),
                image=rgb,
                dsm=dsm,
                black_fraction=float(black.mean()),
                transform=transform,
            )
            win = tile.world_window()
            tile.candidates = [a for a in annotations if a.polygon.intersects(win)]
            tiles.append(tile)
    return tiles


@dataclass
class ClipDiagnostics:
    degenerate: int = 0
    below_visibility: int = 0


def clip_annotations_to_tile(tile: Tile, min_visibility: float = 0.2,
                             diagnostics: Optional[ClipDiagnostics] = None) -> Tile:
    """Intersect candidate crowns with the tile and keep those at least ``min_visibility`` visible.

    Visibility is the clipped world-area over the full crown area, computed
    before rasterisation.
    """
    if not 0.0 < min_visibility <= 1.0:
        raise ValueError("min_visibility must lie in (0, 1]")
    diagnostics = diagnostics if diagnostics is not None else ClipDiagnostics()
    win = tile.world_window()
    inv = ~tile.transform
    coeffs = [inv.a, inv.b, inv.d, inv.e, inv.xoff, inv.yoff]
    kept = []
    for ann in tile.candidates:
        clipped = ann.polygon.intersection(win)
        if clipped.area <= 0:
            diagnostics.degenerate += 1
            continue
        vis = clipped.area / ann.polygon.area
        if vis < min_visibility:
            diagnostics.below_visibility += 1
            continue
        pix = affinity.affine_transform(clipped, coeffs)
        pix = _polygonal(pix)
        if pix is None:
            diagnostics.degenerate += 1
            continue
        kept.append(TileAnnotation(pix, ann.class_label, ann.instance_id, min(1.0, vis)))
    tile.annotations = kept
    return tile


def _polygonal(geom: BaseGeometry) -> Optional[BaseGeometry]:
    if isinstance(geom, (Polygon, MultiPolygon)):
        return geom if geom.area > 0 else None
    polys = [g for g in getattr(geom, "geoms", []) if isinstance(g, Polygon) and g.area > 0]
    return MultiPolygon(polys) if polys else None


def filter_tiles(tiles: Iterable[Tile], max_black_fraction: float = 0.8, require_labels: bool = True) -> list[Tile]:
    if not 0.0 <= max_black_fraction <= 1.0:
        raise ValueError("max_black_fraction must lie in [0, 1]")
    out = []
    for t in tiles:
        if t.black_fraction > max_black_fraction:
            continue
        if require_labels and not t.annotations:
            continue
        out.append(t)
    return out


def assign_splits(tiles: Sequence[Tile], split_polygons: Mapping[str, BaseGeometry]) -> list[Tile]:
    """Put each tile in the split whose polygon contains its centre; others stay unassigned."""
    names = sorted(split_polygons)
    for s in names:
        if s not in SPLITS[:3]:
            raise ValueError(f"unknown split {s!r}")
    for i, a in enumerate(names):
        for b in names[i + 1:]:
            if split_polygons[a].intersection(split_polygons[b]).area > 0:
                raise ValueError(f"ambiguous split: {a} and {b} overlap")
    for t in tiles:
        cx, cy = t.center_world()
        centre = shape({"type": "Point", "coordinates": (cx, cy)})
        t.split = next((s for s in names if split_polygons[s].contains(centre)), "unassigned")
    return list(tiles)


# ---------------------------------------------------------------- I/O

def read_orthomosaic(path: str | Path, raster_id: Optional[str] = None,
                     dsm_path: Optional[str | Path] = None) -> Orthomosaic:
    """Read a 3- or 4-band GeoTIFF; ``dsm_path`` adds a separate single-band DSM."""
    with rasterio.open(path) as src:
        bands = src.read()
        transform = src.transform
        res = abs(src.res[0])
        nodata = src.nodata if src.nodata is not None else 0
    bands = np.moveaxis(bands, 0, -1)
    if bands.shape[2] > 4:
        bands = bands[..., :4]
    if dsm_path is not None:
        if bands.shape[2] != 3:
            raise ValueError("separate DSM given for a raster that already has 4 bands")
        with rasterio.open(dsm_path) as src:
            dsm = src.read(1)
        bands = np.concatenate([bands.astype(np.float32), dsm[..., None].astype(np.float32)], axis=-1)
    return Orthomosaic(raster_id or Path(path).stem, bands, res, nodata, transform)


def write_orthomosaic(path: str | Path, raster: Orthomosaic) -> None:
    data = np.moveaxis(raster.bands, -1, 0)
    with rasterio.open(
        path, "w", driver="GTiff", width=raster.width, height=raster.height, count=data.shape[0],
        dtype=data.dtype, transform=raster.geotransform, nodata=raster.nodata_value,
    ) as dst:
        dst.write(data)


def read_features(path: str | Path, label_field: str = "Label") -> list[tuple[BaseGeometry, dict]]:
    """Polygon features from GeoJSON or GeoPackage as ``(geometry, properties)`` pairs."""
    path = Path(path)
    if path.suffix.lower() == ".gpkg":
        try:
            from pyogrio.raw import read
        except ImportError as e:  # pragma: no cover - optional dependency
            raise ImportError("reading GeoPackage needs pyogrio (pip install crownseg[gpkg])") from e
        from shapely import from_wkb

        meta, _, geoms, fields = read(path)
        cols = list(meta["fields"])
        return [(from_wkb(g), {c: fields[i][k] for i, c in enumerate(cols)}) for k, g in enumerate(geoms)]
    fc = json.loads(path.read_text())
    return [(shape(f["geometry"]), dict(f.get("properties") or {})) for f in fc["features"]]


def read_annotations(path: str | Path, label_field: str = "Label") -> list[CrownAnnotation]:
    out = []
    for k, (geom, props) in enumerate(read_features(path)):
        if label_field not in props:
            raise ValueError(f"feature {k} in {path} lacks a {label_field!r} attribute")
        out.append(CrownAnnotation(geom, str(props[label_field]), str(props.get("id", k))))
    return out


def read_aoi(path: str | Path, purpose: str = "include") -> AOI:
    from shapely.ops import unary_union

    return AOI(unary_union([g for g, _ in read_features(path)]), purpose)


def write_features(path: str | Path, features: Sequence[tuple[BaseGeometry, dict]]) -> None:
    fc = {"type": "FeatureCollection",
          "features": [{"type": "Feature", "geometry": mapping(g), "properties": p} for g, p in features]}
    Path(path).write_text(json.dumps(fc, sort_keys=True))


def _coco_segmentation(poly: BaseGeometry) -> list[list[float]]:
    polys = poly.geoms if isinstance(poly, MultiPolygon) else [poly]
    segs = []
    for p in polys:
        ring = np.asarray(p.exterior.coords)[:-1]
        segs.append([round(float(v), 3) for v in ring.reshape(-1)])
    return segs


def export_coco(tiles: Sequence[Tile], out_dir: str | Path, classes: Sequence[str],
                class_map=None) -> dict[str, Path]:
    """Write tile images, DSM TIFFs and one COCO JSON per split under ``out_dir``.

    ``class_map`` maps raw crown labels to class codes (e.g. ``ClassSchema.map``).
    Returns the JSON path per split.
    """
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    categories = [{"id": i + 1, "name": c} for i, c in enumerate(classes)]
    cat_id = {c: i + 1 for i, c in enumerate(classes)}
    class_map = class_map or (lambda s: s)
    per_split: dict[str, dict] = {}
    ann_id = 1
    for img_id, t in enumerate(tiles, start=1):
        Image.fromarray(np.ascontiguousarray(t.image.astype(np.uint8))).save(out_dir / "images" / f"{t.tile_id}.png")
        entry = {"id": img_id, "file_name": f"images/{t.tile_id}.png", "width": t.size, "height": t.size,
                 "tile_id": t.tile_id, "origin": list(t.origin)}
        if t.dsm is not None:
            write_dsm_tiff(out_dir / "images" / f"{t.tile_id}_dsm.tif", t.dsm, t.transform)
            entry["dsm_file_name"] = f"images/{t.tile_id}_dsm.tif"
        d = per_split.setdefault(t.split, {"images": [], "annotations": [], "categories": categories})
        d["images"].append(entry)
        for a in t.annotations:
            x0, y0, x1, y1 = a.polygon.bounds
            d["annotations"].append({
                "id": ann_id, "image_id": img_id, "category_id": cat_id[class_map(a.class_label)],
                "segmentation": _coco_segmentation(a.polygon), "area": round(float(a.polygon.area), 3),
                "bbox": [round(v, 3) for v in (x0, y0, x1 - x0, y1 - y0)], "iscrowd": 0,
                "instance_id": a.instance_id, "visibility_fraction": round(a.visibility_fraction, 6),
            })
            ann_id += 1
    paths = {}
    for split, d in sorted(per_split.items()):
        p = out_dir / f"{split}.json"
        p.write_text(json.dumps(d, sort_keys=True))
        paths[split] = p
    return paths


def write_dsm_tiff(path: str | Path, dsm: np.ndarray, transform: Optional[Affine] = None) -> None:
    with rasterio.open(path, "w", driver="GTiff", width=dsm.shape[1], height=dsm.shape[0], count=1,
                       dtype="float32", transform=transform if transform is not None else Affine.identity()) as dst:
        dst.write(dsm.astype(np.float32)[None])


def read_dsm_tiff(path: str | Path) -> np.ndarray:
    with rasterio.open(path) as src:
        return src.read(1)


def label_counts(tiles: Iterable[Tile], class_map=None) -> Counter:
    class_map = class_map or (lambda s: s)
    return Counter(class_map(a.class_label) for t in tiles for a in t.annotations)

