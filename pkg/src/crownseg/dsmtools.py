"""DSM normalisation, treetop-like peak prompts and border-masked gradient channels."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import ndimage

log = logging.getLogger(__name__)

# min_distance used per dataset for peak prompts
PEAK_MIN_DISTANCE = {"plantations": 50, "sbl": 20, "bci": 20}


@dataclass
class DsmChannel:
    values: np.ndarray
    valid_mask: Optional[np.ndarray] = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim == 3 and self.values.shape[-1] == 1:
            self.values = self.values[..., 0]
        if self.values.ndim != 2:
            raise ValueError(f"DSM must be 2-D, got shape {self.values.shape}")
        if self.valid_mask is None:
            self.valid_mask = np.ones(self.values.shape, dtype=bool)
        else:
            self.valid_mask = np.asarray(self.valid_mask, dtype=bool)
            if self.valid_mask.shape != self.values.shape:
                raise ValueError("valid_mask must match DSM shape")

    @classmethod
    def from_tile(cls, dsm: np.ndarray, image: Optional[np.ndarray] = None, nodata: float = 0) -> "DsmChannel":
        """Valid pixels are those where the RGB image is not all-``nodata`` (the AOI-masked border)."""
        valid = None
        if image is not None:
            valid = ~np.all(np.asarray(image) == nodata, axis=-1)
        return cls(dsm, valid)


@dataclass(frozen=True)
class PeakConfig:
    min_distance: int = 20

    def __post_init__(self):
        if self.min_distance < 1:
            raise ValueError("min_distance must be >= 1")


def normalize_dsm(dsm: DsmChannel, subtract_min: bool = False) -> DsmChannel:
    """Divide by the per-sample maximum over valid pixels; invalid pixels become 0.

    ``subtract_min`` switches to min-max scaling. A non-positive maximum gives
    an all-zero output and a warning.
    """
    if not dsm.valid_mask.any():
        raise ValueError("DSM has no valid pixel")
    vals = dsm.values.copy()
    if subtract_min:
        vals = vals - vals[dsm.valid_mask].min()
    peak = vals[dsm.valid_mask].max()
    if peak <= 0:
        log.warning("DSM maximum %s <= 0; returning zeros", peak)
        return DsmChannel(np.zeros_like(vals), dsm.valid_mask)
    out = np.where(dsm.valid_mask, vals / peak, 0.0)
    return DsmChannel(out, dsm.valid_mask)


def peak_prompts(dsm: DsmChannel, cfg: PeakConfig) -> list[tuple[int, int]]:
    """Local maxima of the DSM as ``(x, y)`` pixel prompts, highest first.

    A candidate equals the maximum of its ``(2d+1)`` square window and is
    strictly above the valid minimum, so flat inputs give nothing. Connected
    runs of equal-valued candidates (plateaus, common in 8-bit DSMs) are
    reduced to the member pixel closest to their centroid. Candidates are
    then kept greedily in descending value when at least ``min_distance``
    (Euclidean) from every peak already kept.
    """
    d = cfg.min_distance
    vals = np.where(dsm.valid_mask, dsm.values, -np.inf)
    if not dsm.valid_mask.any():
        return []
    floor = vals[dsm.valid_mask].min()
    window_max = ndimage.maximum_filter(vals, size=2 * d + 1, mode="nearest")
    cand = (vals == window_max) & dsm.valid_mask & (vals > floor)
    if not cand.any():
        return []

    labels, n = ndimage.label(cand, structure=np.ones((3, 3), dtype=bool))
    peaks = []
    for lab, sl in enumerate(ndimage.find_objects(labels), start=1):
        ys, xs = np.nonzero(labels[sl] == lab)
        ys = ys + sl[0].start
        xs = xs + sl[1].start
        cy, cx = ys.mean(), xs.mean()
        k = int(np.argmin((ys - cy) ** 2 + (xs - cx) ** 2))
        peaks.append((vals[ys[k], xs[k]], int(ys[k]), int(xs[k])))
    # descending value, ties in row-major order
    peaks.sort(key=lambda p: (-p[0], p[1], p[2]))

    kept: list[tuple[int, int]] = []
    kept_arr = np.empty((0, 2))
    for _, y, x in peaks:
        if len(kept_arr):
            dist2 = ((kept_arr - (y, x)) ** 2).sum(1)
            if dist2.min() < d * d:
                continue
        kept.append((x, y))
        kept_arr = np.vstack([kept_arr, (y, x)])
    return kept


def dsm_gradients(dsm: DsmChannel) -> tuple[np.ndarray, np.ndarray]:
    """Vertical and horizontal central-difference gradients, zeroed over invalid pixels."""
    gy, gx = np.gradient(dsm.values, 1.0)
    invalid = ~dsm.valid_mask
    gy[invalid] = 0.0
    gx[invalid] = 0.0
    return gy, gx


def gradient_channels(dsm: DsmChannel, percentile: float = 99.0) -> np.ndarray:
    """Gradients clamped to a symmetric percentile bound and mapped to [0, 1], shape ``(2, H, W)``."""
    gy, gx = dsm_gradients(dsm)
    out = []
    for g in (gy, gx):
        v = np.abs(g[dsm.valid_mask])
        bound = np.percentile(v, percentile) if v.size else 0.0
        if bound <= 0:
            out.append(np.where(dsm.valid_mask, 0.5, 0.0))
            continue
        scaled = (np.clip(g, -bound, bound) + bound) / (2 * bound)
        out.append(np.where(dsm.valid_mask, scaled, 0.0))
    return np.stack(out).astype(np.float32)
