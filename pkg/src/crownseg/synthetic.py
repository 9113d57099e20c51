"""Synthetic sites and tiles with disk-shaped crowns and matching DSM bumps, for probes and demos."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from affine import Affine
from shapely.geometry import Point, box

from .geodata import AOI, CrownAnnotation, Orthomosaic, rasterize_polygon
from .trainer import Sample

# per-class mean crown colour (RGB); background is soil-brown
CLASS_COLOURS = ((40, 150, 50), (150, 200, 60), (20, 90, 90), (170, 120, 170))
GROUND_COLOUR = (120, 95, 70)


@dataclass(frozen=True)
class SiteSpec:
    size: int = 512
    n_crowns: int = 24
    radius: tuple[float, float] = (10.0, 24.0)
    classes: tuple[str, ...] = ("conifer", "broadleaf")
    max_height: float = 25.0
    noise: float = 8.0
    pixel_resolution: float = 0.05
    origin: tuple[float, float] = (500000.0, 5000000.0)


def _place_disks(rng: np.random.Generator, size: int, n: int, radius: tuple[float, float]):
    disks = []
    tries = 0
    while len(disks) < n and tries < 50 * n:
        tries += 1
        r = rng.uniform(*radius)
        cx, cy = rng.uniform(r, size - r, 2)
        if all(np.hypot(cx - x, cy - y) > 0.8 * (r + q) for x, y, q in disks):
            disks.append((float(cx), float(cy), float(r)))
    return disks


def _paint(rng, size, disks, labels, classes, spec: SiteSpec):
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    rgb = np.empty((size, size, 3), np.float64)
    rgb[:] = GROUND_COLOUR
    dsm = 1.0 + 0.5 * np.sin(xx / 37.0) * np.cos(yy / 53.0)
    for (cx, cy, r), lab in zip(disks, labels):
        d2 = ((xx - cx) ** 2 + (yy - cy) ** 2) / r ** 2
        inside = d2 <= 1.0
        colour = np.array(CLASS_COLOURS[classes.index(lab) % len(CLASS_COLOURS)], float)
        shade = 1.0 - 0.35 * d2
        rgb[inside] = colour * shade[inside, None]
        h = spec.max_height * (0.6 + 0.4 * rng.random())
        dsm = np.where(inside, np.maximum(dsm, 1.0 + h * (1.0 - d2)), dsm)
    rgb += rng.normal(0.0, spec.noise, rgb.shape)
    return np.clip(rgb, 1, 255).astype(np.uint8), dsm.astype(np.float32)


def synthetic_site(seed: int, spec: SiteSpec = SiteSpec()):
    """A 4-band orthomosaic, its crown annotations in world coordinates and an AOI covering the raster."""
    rng = np.random.default_rng(seed)
    disks = _place_disks(rng, spec.size, spec.n_crowns, spec.radius)
    labels = [spec.classes[i % len(spec.classes)] for i in range(len(disks))]
    rgb, dsm = _paint(rng, spec.size, disks, labels, spec.classes, spec)
    res = spec.pixel_resolution
    transform = Affine.translation(*spec.origin) @ Affine.scale(res, -res)
    bands = np.concatenate([rgb.astype(np.float32), dsm[..., None]], axis=-1)
    raster = Orthomosaic(f"site{seed}", bands, res, 0, transform)
    anns = []
    for k, ((cx, cy, r), lab) in enumerate(zip(disks, labels)):
        wx, wy = transform @ (cx, cy)
        anns.append(CrownAnnotation(Point(wx, wy).buffer(r * res, quad_segs=16), lab, f"{seed}-{k}"))
    x0, y0 = transform @ (0, 0)
    x1, y1 = transform @ (spec.size, spec.size)
    aoi = AOI(box(min(x0, x1), min(y0, y1), max(x0, x1), max(y0, y1)))
    return raster, anns, aoi


def synthetic_sample(seed: int, size: int = 128, n_crowns: int = 3,
                     classes: Sequence[str] = ("conifer", "broadleaf"),
                     radius: tuple[float, float] = (12.0, 22.0)) -> Sample:
    """One training tile with well-separated crowns, ready for the trainer."""
    spec = SiteSpec(size=size, n_crowns=n_crowns, radius=radius, classes=tuple(classes))
    rng = np.random.default_rng(seed)
    disks = _place_disks(rng, size, n_crowns, radius)
    labels = [classes[i % len(classes)] for i in range(len(disks))]
    rgb, dsm = _paint(rng, size, disks, labels, list(classes), spec)
    masks = np.stack([rasterize_polygon(Point(cx, cy).buffer(r, quad_segs=16), (size, size))
                      for cx, cy, r in disks])
    return Sample(f"synthetic{seed}", rgb, masks, labels, dsm, np.ones((size, size), bool))
