"""Instance containers shared by every model family and by the evaluation code."""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np


@dataclass
class Detection:
    """One predicted instance.

    ``box`` is ``(x0, y0, x1, y1)`` in tile pixels. ``mask`` is a boolean
    ``H x W`` array or ``None`` for box-only detectors.
    """

    box: tuple[float, float, float, float]
    class_label: str
    box_score: float
    mask: Optional[np.ndarray] = None
    mask_score: Optional[float] = None
    # final score used for ranking; defaults to box_score
    score: Optional[float] = None
    extras: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        x0, y0, x1, y1 = (float(v) for v in self.box)
        if not (x1 > x0 and y1 > y0):
            raise ValueError(f"box must have positive area, got {self.box}")
        self.box = (x0, y0, x1, y1)
        for name in ("box_score", "mask_score", "score"):
            val = getattr(self, name)
            if val is not None and not 0.0 <= val <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {val}")
        if self.score is None:
            self.score = float(self.box_score)
        if self.mask is not None:
            self.mask = np.asarray(self.mask, dtype=bool)

    def with_label(self, label: str) -> "Detection":
        return replace(self, class_label=label)


@dataclass
class GroundTruth:
    mask: np.ndarray
    class_label: str

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)


def mask_to_box(mask: np.ndarray) -> Optional[tuple[float, float, float, float]]:
    """Tight box around a boolean mask in pixel-edge coordinates, ``None`` if empty."""
    ys, xs = np.nonzero(mask)
    if len(xs) == 0:
        return None
    return float(xs.min()), float(ys.min()), float(xs.max() + 1), float(ys.max() + 1)


def mask_iou_matrix(a: np.ndarray, b: np.ndarray, chunk: int = 64) -> np.ndarray:
    """Pairwise IoU between two stacks of boolean masks ``(N, H, W)`` and ``(M, H, W)``."""
    a = np.asarray(a, dtype=bool).reshape(len(a), -1)
    b = np.asarray(b, dtype=bool).reshape(len(b), -1)
    out = np.zeros((len(a), len(b)), dtype=np.float64)
    if len(a) == 0 or len(b) == 0:
        return out
    area_a = a.sum(1).astype(np.float64)
    area_b = b.sum(1).astype(np.float64)
    bf = b.astype(np.float32).T
    for start in range(0, len(a), chunk):
        # float32 sums of 0/1 are exact below 2**24 pixels
        inter = a[start:start + chunk].astype(np.float32) @ bf
        union = area_a[start:start + chunk, None] + area_b[None, :] - inter
        with np.errstate(invalid="ignore", divide="ignore"):
            out[start:start + chunk] = np.where(union > 0, inter / union, 0.0)
    return out


def box_iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0, None)
    inter = wh[..., 0] * wh[..., 1]
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, inter / union, 0.0)
